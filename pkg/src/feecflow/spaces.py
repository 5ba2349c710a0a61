"""Finite element spaces, DOF maps, interpolation, and batched field evaluation.

Families:

* ``"dp"``        discontinuous P_r, element-major modal DOFs
* ``"rt"``        conforming Raviart-Thomas RT_r (facet moments shared)
* ``"broken_rt"`` element-local RT_r, no inter-element coupling
* ``"lagrange"``  continuous nodal Lagrange of the given polynomial degree
* ``"facet"``     piecewise P_r on the mesh skeleton (hybridization multiplier)

Conforming RT facet DOFs are moments against orthonormal Legendre polynomials
in the global facet parametrization, so the element-local coefficient equals
the global one times ``sign * (-1)^(moment degree)`` when the local edge runs
against the global direction.  The same flip rule orders Lagrange edge nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import basis
from .mesh import Mesh
from .quadrature import edge_rule, triangle_rule

FAMILIES = ("dp", "rt", "broken_rt", "lagrange", "facet")


def vol_exactness(r: int) -> int:
    return 2 * (r + 1) + 2


def facet_exactness(r: int) -> int:
    return 2 * (r + 1) + 1


@dataclass
class FeSpace:
    mesh: Mesh
    family: str
    degree: int
    ndof: int
    elem_dofs: np.ndarray | None  # (nt, nloc) or None for facet spaces
    elem_signs: np.ndarray | None
    facet_dofs: np.ndarray | None  # (nf, ndof_per_facet) where applicable
    essential_dofs: np.ndarray  # sorted global indices
    _tab_cache: dict = field(default_factory=dict, repr=False)

    @property
    def nloc(self) -> int:
        return 0 if self.elem_dofs is None else self.elem_dofs.shape[1]

    def zeros(self, label: str = "") -> "FieldVec":
        return FieldVec(self, np.zeros(self.ndof), label)

    # -- cached reference tabulations ------------------------------------

    def volume_tab(self, exactness: int | None = None):
        """(rule, tables) at a volume rule of the given exactness."""
        if exactness is None:
            exactness = vol_exactness(self.degree)
        key = ("vol", exactness)
        if key not in self._tab_cache:
            rule = triangle_rule(exactness)
            self._tab_cache[key] = (rule, self._tabulate(rule.points))
        return self._tab_cache[key]

    def trace_tab(self, exactness: int | None = None):
        """(edge rule, tables stacked over (local edge, flip)) for facet terms.

        Tables have leading shape (3, 2, nq, nloc, ...); index [k, int(flip)].
        """
        if exactness is None:
            exactness = facet_exactness(self.degree)
        key = ("trace", exactness)
        if key not in self._tab_cache:
            rule = edge_rule(exactness)
            t = rule.points[:, 0]
            per = [[self._tabulate(basis.edge_points(k, t, flip)) for flip in (False, True)] for k in range(3)]
            stacked = tuple(
                np.stack([np.stack([per[k][f][i] for f in range(2)]) for k in range(3)])
                for i in range(len(per[0][0]))
            )
            self._tab_cache[key] = (rule, stacked)
        return self._tab_cache[key]

    def _tabulate(self, pts):
        if self.family in ("dp",):
            return basis.dp_tab(self.degree, pts)
        if self.family in ("rt", "broken_rt"):
            return basis.rt_tab(self.degree, pts)
        if self.family == "lagrange":
            return basis.lagrange_tab(self.degree, pts)
        raise ValueError(f"no volume tabulation for family {self.family!r}")


@dataclass
class FieldVec:
    """Coefficient vector bound to its space, with a semantic label."""

    space: FeSpace
    vec: np.ndarray
    label: str = ""

    def __post_init__(self):
        if self.vec.shape != (self.space.ndof,):
            raise ValueError(f"coefficient vector for {self.label or self.space.family} has wrong length")

    def copy(self) -> "FieldVec":
        return FieldVec(self.space, self.vec.copy(), self.label)


def build_space(mesh: Mesh, family: str, degree: int, essential_bc_tags=()) -> FeSpace:
    """Build a space with deterministic global enumeration.

    ``essential_bc_tags`` marks the DOFs whose functionals live on facets with
    those boundary tags (RT normal moments, Lagrange boundary nodes, facet
    multipliers).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    r = degree
    tagged = np.zeros(mesh.n_facets, dtype=bool)
    for t in essential_bc_tags:
        tagged[mesh.facets_with_tag(t)] = True

    if family == "dp":
        if r not in (0, 1, 2):
            raise ValueError(f"dp degree {r} unsupported")
        nb = basis.dp_dim(r)
        elem_dofs = np.arange(mesh.n_tris * nb, dtype=np.int64).reshape(mesh.n_tris, nb)
        return FeSpace(mesh, family, r, mesh.n_tris * nb, elem_dofs,
                       np.ones_like(elem_dofs, dtype=float), None,
                       np.empty(0, dtype=np.int64))

    if family in ("rt", "broken_rt"):
        if r not in (0, 1, 2):
            raise ValueError(f"RT degree {r} unsupported")
        nloc = basis.rt_dim(r)
        nint = nloc - 3 * (r + 1)
        if family == "broken_rt":
            elem_dofs = np.arange(mesh.n_tris * nloc, dtype=np.int64).reshape(mesh.n_tris, nloc)
            return FeSpace(mesh, family, r, mesh.n_tris * nloc, elem_dofs,
                           np.ones_like(elem_dofs, dtype=float), None,
                           np.empty(0, dtype=np.int64))
        nfdof = mesh.n_facets * (r + 1)
        facet_dofs = np.arange(nfdof, dtype=np.int64).reshape(mesh.n_facets, r + 1)
        elem_dofs = np.zeros((mesh.n_tris, nloc), dtype=np.int64)
        signs = np.ones((mesh.n_tris, nloc))
        degs = np.arange(r + 1)
        for f in range(mesh.n_facets):
            for side in range(2):
                e = mesh.f2e[f, side]
                if e < 0:
                    continue
                k = mesh.f2loc[f, side]
                sl = slice(k * (r + 1), (k + 1) * (r + 1))
                elem_dofs[e, sl] = facet_dofs[f]
                sgn = 1.0 if side == 0 else -1.0
                if mesh.f2flip[f, side]:
                    signs[e, sl] = sgn * (-1.0) ** degs
                else:
                    signs[e, sl] = sgn
        if nint:
            interior = nfdof + np.arange(mesh.n_tris * nint, dtype=np.int64).reshape(mesh.n_tris, nint)
            elem_dofs[:, 3 * (r + 1):] = interior
        ess = facet_dofs[tagged].ravel() if tagged.any() else np.empty(0, dtype=np.int64)
        return FeSpace(mesh, family, r, nfdof + mesh.n_tris * nint, elem_dofs, signs,
                       facet_dofs, np.sort(ess))

    if family == "lagrange":
        d = degree
        if d not in (1, 2, 3):
            raise ValueError(f"lagrange degree {d} unsupported")
        cverts, cmap = np.unique(mesh.vcanon, return_inverse=True)
        ncv = cverts.shape[0]
        nedge = d - 1
        nint = basis.lagrange_dim(d) - 3 - 3 * nedge
        off_f = ncv
        off_i = ncv + mesh.n_facets * nedge
        ndof = off_i + mesh.n_tris * nint
        nloc = basis.lagrange_dim(d)
        elem_dofs = np.zeros((mesh.n_tris, nloc), dtype=np.int64)
        elem_dofs[:, :3] = cmap[mesh.tris]
        for f in range(mesh.n_facets):
            for side in range(2):
                e = mesh.f2e[f, side]
                if e < 0:
                    continue
                k = mesh.f2loc[f, side]
                loc = basis.lagrange_edge_dof_indices(d, k)
                glb = off_f + f * nedge + np.arange(nedge)
                if mesh.f2flip[f, side]:
                    glb = glb[::-1]
                elem_dofs[e, loc] = glb
        if nint:
            elem_dofs[:, 3 + 3 * nedge:] = off_i + np.arange(mesh.n_tris * nint, dtype=np.int64).reshape(
                mesh.n_tris, nint)
        ess = set()
        for f in np.nonzero(tagged)[0]:
            ess.update(cmap[mesh.vcanon[mesh.fverts[f]]])
            ess.update(off_f + f * nedge + np.arange(nedge))
        return FeSpace(mesh, family, d, ndof, elem_dofs, np.ones((mesh.n_tris, nloc)), None,
                       np.array(sorted(ess), dtype=np.int64))

    # facet multiplier space
    if r not in (0, 1, 2):
        raise ValueError(f"facet degree {r} unsupported")
    facet_dofs = np.arange(mesh.n_facets * (r + 1), dtype=np.int64).reshape(mesh.n_facets, r + 1)
    ess = facet_dofs[tagged].ravel() if tagged.any() else np.empty(0, dtype=np.int64)
    return FeSpace(mesh, family, r, mesh.n_facets * (r + 1), None, None, facet_dofs, np.sort(ess))


# ---------------------------------------------------------------------------
# interpolation


def interpolate(space: FeSpace, fn: Callable, label: str = "") -> FieldVec:
    """Interpolate an analytic field.

    ``fn(x, y)`` returns a scalar for dP/Lagrange/facet spaces and an (..., 2)
    velocity-like array for RT spaces.  dP uses element-local L2 projection,
    RT the canonical facet/interior moments, Lagrange nodal evaluation, and
    the facet family L2 moments along each facet.
    """
    mesh = space.mesh
    if space.family == "dp":
        rule, (vals, _) = space.volume_tab()
        pts = _phys_points(mesh, rule.points)
        f = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)
        # orthonormal modal basis: M_T = detJ * I
        coef = np.einsum("q,eq,qb->eb", rule.weights, f, vals)
        return FieldVec(space, coef.ravel(), label)

    if space.family in ("rt", "broken_rt"):
        return _interpolate_rt(space, fn, label)

    if space.family == "lagrange":
        d = space.degree
        nodes = basis._lagrange_nodes(d)
        vec = np.zeros(space.ndof)
        pts = _phys_points(mesh, nodes)  # (nt, nloc, 2)
        vals = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)
        vec[space.elem_dofs.ravel()] = vals.ravel()
        return FieldVec(space, vec, label)

    if space.family == "facet":
        r = space.degree
        rule = edge_rule(facet_exactness(r))
        t = rule.points[:, 0]
        leg = basis.legendre01(r, t)
        a = mesh.verts[mesh.fverts[:, 0]]
        b = mesh.verts[mesh.fverts[:, 1]]
        pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
        f = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)
        # orthonormal Legendre in the arc parametrization
        coef = np.einsum("q,fq,qj->fj", rule.weights, f, leg)
        vec = np.zeros(space.ndof)
        vec[space.facet_dofs.ravel()] = coef.ravel()
        return FieldVec(space, vec, label)

    raise ValueError(space.family)


def _interpolate_rt(space: FeSpace, fn, label):
    mesh = space.mesh
    r = space.degree
    erule = edge_rule(2 * (r + 1) + 2)
    t = erule.points[:, 0]
    leg = basis.legendre01(r, t)
    a = mesh.verts[mesh.fverts[:, 0]]
    b = mesh.verts[mesh.fverts[:, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    u = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)
    un = np.einsum("fqc,fc->fq", u, mesh.fnormal)
    # moment against P_j in arc length: |e| * sum_q w_q (u.n) P_j(t_q)
    fmom = mesh.flen[:, None] * np.einsum("q,fq,qj->fj", erule.weights, un, leg)

    nloc = basis.rt_dim(r)
    nint = nloc - 3 * (r + 1)
    if space.family == "rt":
        vec = np.zeros(space.ndof)
        vec[space.facet_dofs.ravel()] = fmom.ravel()
        if nint:
            vec[mesh.n_facets * (r + 1):] = _rt_interior_moments(space, fn, r).ravel()
        return FieldVec(space, vec, label)

    # broken: per element local DOFs with local orientation
    coef = np.zeros((mesh.n_tris, nloc))
    degs = np.arange(r + 1)
    for f in range(mesh.n_facets):
        for side in range(2):
            e = mesh.f2e[f, side]
            if e < 0:
                continue
            k = mesh.f2loc[f, side]
            sgn = 1.0 if side == 0 else -1.0
            s = sgn * ((-1.0) ** degs if mesh.f2flip[f, side] else 1.0)
            coef[e, k * (r + 1):(k + 1) * (r + 1)] = s * fmom[f]
    if nint:
        coef[:, 3 * (r + 1):] = _rt_interior_moments(space, fn, r)
    return FieldVec(space, coef.ravel(), label)


def _rt_interior_moments(space, fn, r):
    mesh = space.mesh
    rule = triangle_rule(vol_exactness(r))
    pts = _phys_points(mesh, rule.points)
    u = np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float)  # (nt, nq, 2)
    # covariant pull-back detJ * J^{-1} u
    upb = np.einsum("e,ecd,eqd->eqc", mesh.det_jac, mesh.jac_inv, u)
    w_tab, _ = basis.dp_tab(r - 1, rule.points)
    nw = basis.dp_dim(r - 1)
    mom = np.zeros((mesh.n_tris, 2 * nw))
    for j in range(nw):
        for comp in range(2):
            mom[:, 2 * j + comp] = np.einsum("q,eq->e", rule.weights * w_tab[:, j], upb[:, :, comp])
    return mom


# ---------------------------------------------------------------------------
# batched field evaluation


def _phys_points(mesh: Mesh, ref_pts: np.ndarray) -> np.ndarray:
    """Map reference points to physical coordinates in every element: (nt, nq, 2)."""
    v0 = mesh.verts[mesh.tris[:, 0]]
    return v0[:, None, :] + np.einsum("eab,qb->eqa", mesh.jac, ref_pts)


def elem_coefs(f: FieldVec) -> np.ndarray:
    """Element-local coefficients with orientation signs applied: (nt, nloc)."""
    s = f.space
    return f.vec[s.elem_dofs] * s.elem_signs


def eval_scalar(f: FieldVec, vals_tab: np.ndarray) -> np.ndarray:
    """dP/Lagrange values at tabulated points: (nt, nq)."""
    return elem_coefs(f) @ vals_tab.T


def eval_scalar_grad(f: FieldVec, grad_tab: np.ndarray) -> np.ndarray:
    """Physical gradients at tabulated points: (nt, nq, 2)."""
    mesh = f.space.mesh
    nq, nb, _ = grad_tab.shape
    gref = (elem_coefs(f) @ grad_tab.transpose(1, 0, 2).reshape(nb, nq * 2)).reshape(-1, nq, 2)
    return np.matmul(gref, mesh.jac_inv)


def eval_scalar_curl(f: FieldVec, grad_tab: np.ndarray) -> np.ndarray:
    """2D vector curl (dz/dy, -dz/dx) of a scalar field: (nt, nq, 2)."""
    g = eval_scalar_grad(f, grad_tab)
    return np.stack([g[..., 1], -g[..., 0]], axis=-1)


def eval_rt(f: FieldVec, vals_tab: np.ndarray) -> np.ndarray:
    """Piola-mapped RT values at tabulated points: (nt, nq, 2)."""
    mesh = f.space.mesh
    nq, nb, _ = vals_tab.shape
    vref = (elem_coefs(f) @ vals_tab.transpose(1, 0, 2).reshape(nb, nq * 2)).reshape(-1, nq, 2)
    return np.matmul(vref, mesh.jac.transpose(0, 2, 1)) / mesh.det_jac[:, None, None]


def eval_rt_div(f: FieldVec, div_tab: np.ndarray) -> np.ndarray:
    """RT divergences at tabulated points: (nt, nq)."""
    mesh = f.space.mesh
    return (elem_coefs(f) @ div_tab.T) / mesh.det_jac[:, None]


def facet_side_tables(space: FeSpace, facets: np.ndarray, side: int, exactness: int | None = None):
    """Per-facet trace tables for one side: tuple of (nF, nq, nloc, ...) arrays.

    The gathered tables are cached per facet subset, so repeated assembly over
    the same facet sets (every time step) costs one advanced-index gather total.
    """
    rule, stacked = space.trace_tab(exactness)
    mesh = space.mesh
    key = ("gather", rule.exactness, side, hash(facets.tobytes()))
    hit = space._tab_cache.get(key)
    if hit is None:
        loc = mesh.f2loc[facets, side]
        flip = mesh.f2flip[facets, side].astype(np.int64)
        hit = tuple(tab[loc, flip] for tab in stacked)
        space._tab_cache[key] = hit
    return rule, hit


def facet_trace_scalar(f: FieldVec, facets: np.ndarray, side: int, exactness: int | None = None) -> np.ndarray:
    """Scalar trace from the given side at facet quadrature points: (nF, nq)."""
    _, (vals, _) = facet_side_tables(f.space, facets, side, exactness)
    elems = f.space.mesh.f2e[facets, side]
    return np.einsum("fqb,fb->fq", vals, elem_coefs(f)[elems], optimize=True)


def facet_trace_rt(f: FieldVec, facets: np.ndarray, side: int, exactness: int | None = None) -> np.ndarray:
    """RT vector trace from the given side: (nF, nq, 2)."""
    _, (vals, _) = facet_side_tables(f.space, facets, side, exactness)
    mesh = f.space.mesh
    elems = mesh.f2e[facets, side]
    vref = np.einsum("fqbc,fb->fqc", vals, elem_coefs(f)[elems], optimize=True)
    return np.einsum("fab,fqb->fqa", mesh.jac[elems], vref, optimize=True) / mesh.det_jac[elems, None, None]


def locate_points(mesh: Mesh, pts: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Find containing elements and reference coordinates for physical points.

    Brute-force over candidate elements sorted by centroid distance; fine for
    the sampling volumes used in error measurement and profiles.
    """
    from scipy.spatial import cKDTree

    tree = cKDTree(mesh.centroids)
    nq = pts.shape[0]
    elems = np.full(nq, -1, dtype=np.int64)
    refs = np.zeros((nq, 2))
    k = min(mesh.n_tris, 24)
    _, cand = tree.query(pts, k=k)
    cand = np.atleast_2d(cand)
    v0 = mesh.verts[mesh.tris[:, 0]]
    for i in range(nq):
        for e in cand[i]:
            xr = mesh.jac_inv[e] @ (pts[i] - v0[e])
            if xr[0] >= -tol and xr[1] >= -tol and xr[0] + xr[1] <= 1 + tol:
                elems[i] = e
                refs[i] = np.clip(xr, 0.0, 1.0)
                break
        else:
            raise ValueError(f"point {pts[i]} not located in mesh")
    return elems, refs


def eval_at_points(f: FieldVec, pts: np.ndarray) -> np.ndarray:
    """Point values of a dP/Lagrange (scalar) or RT (vector) field."""
    mesh = f.space.mesh
    elems, refs = locate_points(mesh, pts)
    coefs = elem_coefs(f)[elems]
    if f.space.family in ("dp", "lagrange"):
        out = np.zeros(pts.shape[0])
        for i in range(pts.shape[0]):
            vals = f.space._tabulate(refs[i:i + 1])[0]
            out[i] = vals[0] @ coefs[i]
        return out
    if f.space.family in ("rt", "broken_rt"):
        out = np.zeros((pts.shape[0], 2))
        for i in range(pts.shape[0]):
            vals = f.space._tabulate(refs[i:i + 1])[0]
            e = elems[i]
            out[i] = mesh.jac[e] @ (vals[0].T @ coefs[i]) / mesh.det_jac[e]
        return out
    raise ValueError(f.space.family)
