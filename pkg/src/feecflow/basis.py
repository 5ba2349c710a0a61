"""Reference-element bases for the compatible triple dP_r, RT_r, Lagrange_{r+1}.

All bases live on the reference triangle with vertices (0,0), (1,0), (0,1).
Local edge k runs from vertex (k+1)%3 to vertex (k+2)%3, so that for a
counter-clockwise triangle the rotation of the edge direction by -90 degrees
is the outward normal.

Conventions baked in here and relied on everywhere else:

* dP_r uses an L2-orthonormal modal basis, so element mass matrices are
  ``det(J) * I`` on affine cells.
* RT_r degrees of freedom are facet moments against orthonormal shifted
  Legendre polynomials (r+1 per edge, ordered by polynomial degree) followed
  by interior moments against a basis of (P_{r-1})^2.  Facet moments are
  invariant under the contravariant Piola map, which makes the local-to-global
  coupling a pure sign flip.
* Lagrange_d uses equispaced nodes: vertices, then d-1 nodes per edge ordered
  along the local edge direction, then interior nodes.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .quadrature import edge_rule, reference_triangle_monomial_integral, triangle_rule

REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# local edge k = (k+1)%3 -> (k+2)%3
EDGE_VERTS = np.array([[1, 2], [2, 0], [0, 1]], dtype=np.int64)
EDGE_TANGENTS = np.array([REF_VERTS[b] - REF_VERTS[a] for a, b in EDGE_VERTS])
EDGE_LENGTHS = np.linalg.norm(EDGE_TANGENTS, axis=1)
# rotate tangent by -90 degrees: outward for CCW triangles
EDGE_NORMALS = np.column_stack([EDGE_TANGENTS[:, 1], -EDGE_TANGENTS[:, 0]]) / EDGE_LENGTHS[:, None]


def dp_dim(r: int) -> int:
    return (r + 1) * (r + 2) // 2


def rt_dim(r: int) -> int:
    return (r + 1) * (r + 3)


def lagrange_dim(d: int) -> int:
    return (d + 1) * (d + 2) // 2


def monomial_exponents(r: int) -> list[tuple[int, int]]:
    """Bivariate exponents of total degree <= r, ordered by degree."""
    return [(a - b, b) for a in range(r + 1) for b in range(a + 1)]


def _mono_eval(exps, pts):
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([x**a * y**b for a, b in exps])


def _mono_grad(exps, pts):
    x, y = pts[:, 0], pts[:, 1]
    out = np.zeros((pts.shape[0], len(exps), 2))
    for j, (a, b) in enumerate(exps):
        if a > 0:
            out[:, j, 0] = a * x ** (a - 1) * y**b
        if b > 0:
            out[:, j, 1] = b * x**a * y ** (b - 1)
    return out


def legendre01(r: int, t: np.ndarray) -> np.ndarray:
    """Shifted Legendre polynomials on [0,1], orthonormal, degrees 0..r.

    Under the flip t -> 1-t, degree j picks up the sign (-1)^j.
    """
    t = np.asarray(t, dtype=float)
    x = 2.0 * t - 1.0
    vals = np.ones((t.shape[0], r + 1))
    if r >= 1:
        vals[:, 1] = x
    for j in range(1, r):
        vals[:, j + 1] = ((2 * j + 1) * x * vals[:, j] - j * vals[:, j - 1]) / (j + 1)
    return vals * np.sqrt(2.0 * np.arange(r + 1) + 1.0)


def edge_points(k: int, t: np.ndarray, flip: bool = False) -> np.ndarray:
    """Reference coordinates on local edge k at (possibly flipped) parameters."""
    s = 1.0 - t if flip else t
    a, b = EDGE_VERTS[k]
    return REF_VERTS[a] + np.outer(s, REF_VERTS[b] - REF_VERTS[a])


@lru_cache(maxsize=None)
def _dp_coeffs(r: int) -> tuple[tuple[tuple[int, int], ...], np.ndarray]:
    exps = tuple(monomial_exponents(r))
    n = len(exps)
    gram = np.empty((n, n))
    for i, (a, b) in enumerate(exps):
        for j, (c, d) in enumerate(exps):
            gram[i, j] = reference_triangle_monomial_integral(a + c, b + d)
    low = np.linalg.cholesky(gram)
    # coeffs[:, k]: monomial coefficients of the k-th orthonormal function
    coeffs = np.linalg.inv(low).T
    return exps, coeffs


def dp_tab(r: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values (nq, nb) and reference gradients (nq, nb, 2) of the dP_r basis."""
    exps, coeffs = _dp_coeffs(r)
    vals = _mono_eval(exps, pts) @ coeffs
    grads = np.einsum("qmc,mb->qbc", _mono_grad(exps, pts), coeffs)
    return vals, grads


@lru_cache(maxsize=None)
def _lagrange_nodes(d: int) -> np.ndarray:
    nodes = [REF_VERTS[i] for i in range(3)]
    for k in range(3):
        a, b = EDGE_VERTS[k]
        for j in range(1, d):
            t = j / d
            nodes.append(REF_VERTS[a] + t * (REF_VERTS[b] - REF_VERTS[a]))
    if d == 3:
        nodes.append(np.array([1.0 / 3.0, 1.0 / 3.0]))
    elif d > 3:
        raise ValueError(f"Lagrange degree {d} not supported")
    return np.array(nodes)


@lru_cache(maxsize=None)
def _lagrange_coeffs(d: int):
    exps = tuple(monomial_exponents(d))
    nodes = _lagrange_nodes(d)
    vand = _mono_eval(exps, nodes)
    return exps, np.linalg.inv(vand)


def lagrange_tab(d: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and reference gradients of the degree-d nodal Lagrange basis."""
    exps, coeffs = _lagrange_coeffs(d)
    vals = _mono_eval(exps, pts) @ coeffs
    grads = np.einsum("qmc,mb->qbc", _mono_grad(exps, pts), coeffs)
    return vals, grads


def _rt_span(r: int):
    """Spanning set of RT_r = (P_r)^2 + x * homogeneous(P_r)."""
    exps = monomial_exponents(r)
    homog = [(a, b) for a, b in exps if a + b == r]

    def values(pts):
        mono = _mono_eval(exps, pts)
        x, y = pts[:, 0], pts[:, 1]
        cols = []
        for j in range(len(exps)):
            v = np.zeros((pts.shape[0], 2))
            v[:, 0] = mono[:, j]
            cols.append(v)
        for j in range(len(exps)):
            v = np.zeros((pts.shape[0], 2))
            v[:, 1] = mono[:, j]
            cols.append(v)
        for a, b in homog:
            q = x**a * y**b
            cols.append(np.column_stack([x * q, y * q]))
        return np.stack(cols, axis=1)  # (nq, ns, 2)

    def divergences(pts):
        grads = _mono_grad(exps, pts)
        x, y = pts[:, 0], pts[:, 1]
        cols = [grads[:, j, 0] for j in range(len(exps))]
        cols += [grads[:, j, 1] for j in range(len(exps))]
        # div(x q) = (2 + r) q for homogeneous q of degree r
        cols += [(2.0 + r) * x**a * y**b for a, b in homog]
        return np.stack(cols, axis=1)  # (nq, ns)

    def gradients(pts):
        """d v_c / d x_d for every span function: (nq, ns, 2, 2)."""
        nq = pts.shape[0]
        mono_g = _mono_grad(exps, pts)
        x, y = pts[:, 0], pts[:, 1]
        cols = []
        for comp in range(2):
            for j in range(len(exps)):
                g = np.zeros((nq, 2, 2))
                g[:, comp, :] = mono_g[:, j, :]
                cols.append(g)
        for a, b in homog:
            q = x**a * y**b
            qx = a * x ** (a - 1) * y**b if a > 0 else np.zeros(nq)
            qy = b * x**a * y ** (b - 1) if b > 0 else np.zeros(nq)
            g = np.zeros((nq, 2, 2))
            g[:, 0, 0] = q + x * qx
            g[:, 0, 1] = x * qy
            g[:, 1, 0] = y * qx
            g[:, 1, 1] = q + y * qy
            cols.append(g)
        return np.stack(cols, axis=1)  # (nq, ns, 2, 2)

    return values, divergences, gradients


@lru_cache(maxsize=None)
def _rt_coeffs(r: int) -> np.ndarray:
    """Span coefficients of the RT_r basis dual to the canonical functionals."""
    if r not in (0, 1, 2):
        raise ValueError(f"RT degree {r} not supported")
    span_val, _, _ = _rt_span(r)
    ndof = rt_dim(r)
    n_mat = np.zeros((ndof, ndof))
    erule = edge_rule(2 * (r + 1))
    t = erule.points[:, 0]
    leg = legendre01(r, t)
    row = 0
    for k in range(3):
        vals = span_val(edge_points(k, t))  # (nq, ns, 2)
        vn = vals @ EDGE_NORMALS[k]
        for j in range(r + 1):
            n_mat[row] = EDGE_LENGTHS[k] * np.einsum("q,qs->s", erule.weights * leg[:, j], vn)
            row += 1
    if r >= 1:
        trule = triangle_rule(2 * (r + 1))
        vals = span_val(trule.points)
        ivals, _ = dp_tab(r - 1, trule.points)
        for j in range(dp_dim(r - 1)):
            for comp in range(2):
                n_mat[row] = np.einsum("q,qs->s", trule.weights * ivals[:, j], vals[:, :, comp])
                row += 1
    assert row == ndof
    return np.linalg.inv(n_mat)


def rt_tab(r: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference values (nq, nb, 2) and divergences (nq, nb) of the RT_r basis."""
    coeffs = _rt_coeffs(r)
    span_val, span_div, _ = _rt_span(r)
    vals = np.einsum("qsc,sb->qbc", span_val(pts), coeffs)
    divs = span_div(pts) @ coeffs
    return vals, divs


def rt_grad_tab(r: int, pts: np.ndarray) -> np.ndarray:
    """Reference gradients d v_c / d x_d of the RT_r basis: (nq, nb, 2, 2)."""
    coeffs = _rt_coeffs(r)
    _, _, span_grad = _rt_span(r)
    return np.einsum("qscd,sb->qbcd", span_grad(pts), coeffs)


def rt_edge_dof_slices(r: int) -> list[slice]:
    """Local DOF index ranges of the three edge-moment blocks."""
    return [slice(k * (r + 1), (k + 1) * (r + 1)) for k in range(3)]


def rt_interior_slice(r: int) -> slice:
    return slice(3 * (r + 1), rt_dim(r))


def lagrange_edge_dof_indices(d: int, k: int) -> np.ndarray:
    """Local node indices interior to edge k, ordered along the local direction."""
    return np.arange(3 + k * (d - 1), 3 + (k + 1) * (d - 1), dtype=np.int64)
