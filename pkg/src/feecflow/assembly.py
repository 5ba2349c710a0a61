"""Sparse assembly of the bilinear forms behind the implicit stages.

Every assembler tabulates the reference basis once, evaluates element
contributions as batched einsum contractions over all elements (or facets),
and scatters into COO triplets; scipy's duplicate summation produces the CSR.
Element order is fixed, so repeated assemblies are bit-identical.

Facet sums follow the single-count convention: each interior facet appears
once with jump [v] = v+ - v- and average {v} = (v+ + v-)/2 taken with the
stored facet normal (pointing from side 1 to side 2).  Jumps vanish on
boundary facets, so the interior-penalty form has no boundary terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import basis
from .quadrature import edge_rule, triangle_rule
from .spaces import FeSpace, facet_exactness, facet_side_tables, vol_exactness


@dataclass
class CsrMatrix:
    """CSR matrix with a symmetry promise checked on demand."""

    mat: sp.csr_matrix
    symmetric: bool = False

    @property
    def shape(self):
        return self.mat.shape

    def check_symmetry(self, tol: float = 1e-13) -> bool:
        d = self.mat - self.mat.T
        denom = max(abs(self.mat.data).max() if self.mat.nnz else 0.0, 1e-300)
        return (abs(d.data).max() if d.nnz else 0.0) <= tol * denom

    def __matmul__(self, x):
        return self.mat @ x


def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    m = sp.coo_matrix((np.asarray(vals, dtype=float).ravel(),
                       (np.asarray(rows).ravel(), np.asarray(cols).ravel())), shape=shape)
    return m.tocsr()


def _weight_at_points(mesh, weight, rule, default=1.0):
    """Normalize a weight spec to an (nt, nq) array."""
    nt, nq = mesh.n_tris, rule.n
    if weight is None:
        return np.full((nt, nq), default)
    w = np.asarray(weight, dtype=float) if not callable(weight) else None
    if w is not None and w.ndim == 0:
        return np.full((nt, nq), float(w))
    if w is not None and w.shape == (nt,):
        return np.repeat(w[:, None], nq, axis=1)
    if w is not None and w.shape == (nt, nq):
        return w
    if callable(weight):
        from .spaces import _phys_points

        pts = _phys_points(mesh, rule.points)
        return np.asarray(weight(pts[..., 0], pts[..., 1]), dtype=float)
    raise ValueError("weight must be None, scalar, (nt,), (nt,nq), or callable")


def mass_matrix(space: FeSpace, weight=None, require_spd: bool = False) -> CsrMatrix:
    """Weighted mass matrix; SPD whenever the weight is positive."""
    rule, tabs = space.volume_tab()
    mesh = space.mesh
    w = _weight_at_points(mesh, weight, rule)
    if require_spd and np.any(w <= 0):
        e = int(np.argmax(np.any(w <= 0, axis=1)))
        raise ValueError(f"non-positive SPD weight on element {e}")
    if space.family in ("dp", "lagrange"):
        vals = tabs[0]
        loc = np.einsum("q,eq,qi,qj->eij", rule.weights, w * mesh.det_jac[:, None], vals, vals,
                        optimize=True)
    elif space.family in ("rt", "broken_rt"):
        vals = tabs[0]
        jtj = np.einsum("eca,ecb->eab", mesh.jac, mesh.jac) / mesh.det_jac[:, None, None]
        loc = np.einsum("q,eq,qia,eab,qjb->eij", rule.weights, w, vals, jtj, vals, optimize=True)
        loc *= space.elem_signs[:, :, None] * space.elem_signs[:, None, :]
    else:
        raise ValueError(f"mass matrix undefined for family {space.family!r}")
    rows = np.repeat(space.elem_dofs, space.nloc, axis=1)
    cols = np.tile(space.elem_dofs, (1, space.nloc))
    return CsrMatrix(_scatter(rows, cols, loc, (space.ndof, space.ndof)), symmetric=True)


def div_matrix(rt: FeSpace, dp: FeSpace) -> CsrMatrix:
    """Entries (div v_j, q_i): rows over dP, columns over (broken) RT."""
    if rt.mesh is not dp.mesh:
        raise ValueError("spaces live on different meshes")
    if rt.degree != dp.degree:
        raise ValueError("div pairing requires matching degree (RT_r, dP_r)")
    rule = triangle_rule(vol_exactness(rt.degree))
    dpv, _ = basis.dp_tab(dp.degree, rule.points)
    _, rtd = basis.rt_tab(rt.degree, rule.points)
    ref = np.einsum("q,qi,qj->ij", rule.weights, dpv, rtd)  # geometry-free
    loc = ref[None, :, :] * rt.elem_signs[:, None, :]
    rows = np.repeat(dp.elem_dofs, rt.nloc, axis=1)
    cols = np.tile(rt.elem_dofs, (1, dp.nloc))
    return CsrMatrix(_scatter(rows, cols, loc, (dp.ndof, rt.ndof)))


def divdiv_matrix(rt: FeSpace, eps) -> CsrMatrix:
    """Entries (eps div v_j, div v_i) with per-element viscosity eps."""
    mesh = rt.mesh
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (mesh.n_tris,))
    if np.any(eps < 0):
        raise ValueError("negative viscosity in div-div form")
    rule = triangle_rule(vol_exactness(rt.degree))
    _, rtd = basis.rt_tab(rt.degree, rule.points)
    ref = np.einsum("q,qi,qj->ij", rule.weights, rtd, rtd)
    loc = (eps / mesh.det_jac)[:, None, None] * ref[None]
    loc *= rt.elem_signs[:, :, None] * rt.elem_signs[:, None, :]
    rows = np.repeat(rt.elem_dofs, rt.nloc, axis=1)
    cols = np.tile(rt.elem_dofs, (1, rt.nloc))
    return CsrMatrix(_scatter(rows, cols, loc, (rt.ndof, rt.ndof)), symmetric=True)


def _lagrange_curl_tab(lag: FeSpace, rule):
    _, grads = basis.lagrange_tab(lag.degree, rule.points)
    return np.stack([grads[:, :, 1], -grads[:, :, 0]], axis=-1)  # (nq, nb, 2)


def curl_matrix(lag: FeSpace, rt: FeSpace) -> CsrMatrix:
    """Entries (curl z_j, v_i): rows over RT, columns over Lagrange.

    The 2D scalar-to-vector curl of the Lagrange basis is the Piola image of
    the reference curl, so the contraction reuses the RT metric.
    """
    mesh = rt.mesh
    rule = triangle_rule(vol_exactness(rt.degree) + lag.degree)
    curls = _lagrange_curl_tab(lag, rule)
    rtv, _ = basis.rt_tab(rt.degree, rule.points)
    jtj = np.einsum("eca,ecb->eab", mesh.jac, mesh.jac) / mesh.det_jac[:, None, None]
    loc = np.einsum("q,qia,eab,qjb->eij", rule.weights, rtv, jtj, curls, optimize=True)
    loc *= rt.elem_signs[:, :, None]
    rows = np.repeat(rt.elem_dofs, lag.nloc, axis=1)
    cols = np.tile(lag.elem_dofs, (1, rt.nloc))
    return CsrMatrix(_scatter(rows, cols, loc, (rt.ndof, lag.ndof)))


def curlcurl_matrix(lag: FeSpace, weight=None) -> CsrMatrix:
    """Entries (curl z_j, curl z_i); kernel contains the constants."""
    mesh = lag.mesh
    rule = triangle_rule(2 * lag.degree)
    w = _weight_at_points(mesh, weight, rule)
    curls = _lagrange_curl_tab(lag, rule)
    jtj = np.einsum("eca,ecb->eab", mesh.jac, mesh.jac) / mesh.det_jac[:, None, None]
    loc = np.einsum("q,eq,qia,eab,qjb->eij", rule.weights, w, curls, jtj, curls, optimize=True)
    rows = np.repeat(lag.elem_dofs, lag.nloc, axis=1)
    cols = np.tile(lag.elem_dofs, (1, lag.nloc))
    return CsrMatrix(_scatter(rows, cols, loc, (lag.ndof, lag.ndof)), symmetric=True)


def sip_form(dp: FeSpace, eps, zeta: float = 40.0) -> CsrMatrix:
    """Symmetric interior-penalty form for -div(eps grad), facet-wise penalty zeta*eps/h.

    eps is per element (the limiter's natural output); the facet penalty uses
    max(eps+, eps-) and h = facet length.  Boundary facets carry no terms.
    """
    mesh = dp.mesh
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (mesh.n_tris,)).copy()
    if np.any(eps < 0):
        raise ValueError("negative viscosity in interior-penalty form")
    if zeta <= 0:
        raise ValueError("penalty parameter must be positive")
    ndof = dp.ndof
    if not np.any(eps > 0):
        return CsrMatrix(sp.csr_matrix((ndof, ndof)), symmetric=True)

    rule, (vals, grads) = dp.volume_tab()
    hmat = np.einsum("ecd,efd->ecf", mesh.jac_inv, mesh.jac_inv)
    loc = np.einsum("q,e,qia,eab,qjb->eij", rule.weights,
                    eps * mesh.det_jac, grads, hmat, grads, optimize=True)
    rows = [np.repeat(dp.elem_dofs, dp.nloc, axis=1).ravel()]
    cols = [np.tile(dp.elem_dofs, (1, dp.nloc)).ravel()]
    data = [loc.ravel()]

    interior = np.nonzero(mesh.interior_mask)[0]
    if interior.size:
        erule, (v0, g0) = facet_side_tables(dp, interior, 0)
        _, (v1, g1) = facet_side_tables(dp, interior, 1)
        e0, e1 = mesh.f2e[interior, 0], mesh.f2e[interior, 1]
        n = mesh.fnormal[interior]
        ln = mesh.flen[interior]
        # physical (eps grad phi).n per side
        gn0 = eps[e0, None, None] * np.einsum("fcd,fqbc,fd->fqb", mesh.jac_inv[e0], g0, n, optimize=True)
        gn1 = eps[e1, None, None] * np.einsum("fcd,fqbc,fd->fqb", mesh.jac_inv[e1], g1, n, optimize=True)
        pen = zeta * np.maximum(eps[e0], eps[e1]) / ln
        wq = erule.weights
        dofs = (dp.elem_dofs[e0], dp.elem_dofs[e1])
        sgn = (1.0, -1.0)
        tr = (v0, v1)
        gn = (gn0, gn1)
        for a in range(2):
            for b in range(2):
                blk = sgn[a] * sgn[b] * np.einsum("q,f,fqi,fqj->fij", wq, pen * ln, tr[a], tr[b],
                                                  optimize=True)
                blk -= 0.5 * sgn[a] * np.einsum("q,f,fqi,fqj->fij", wq, ln, tr[a], gn[b], optimize=True)
                blk -= 0.5 * sgn[b] * np.einsum("q,f,fqi,fqj->fij", wq, ln, gn[a], tr[b], optimize=True)
                rows.append(np.repeat(dofs[a], dp.nloc, axis=1).ravel())
                cols.append(np.tile(dofs[b], (1, dp.nloc)).ravel())
                data.append(blk.ravel())

    m = _scatter(np.concatenate(rows), np.concatenate(cols), np.concatenate(data), (ndof, ndof))
    return CsrMatrix(m, symmetric=True)


def rt_normal_trace_tab(rt: FeSpace, facets: np.ndarray, side: int, exactness=None):
    """(rule, (nF, nq, nloc)) physical normal traces v.n_T on the element's side."""
    rule, stacked = rt.trace_tab(exactness)
    mesh = rt.mesh
    loc = mesh.f2loc[facets, side]
    flip = mesh.f2flip[facets, side].astype(np.int64)
    vals = stacked[0][loc, flip]  # (nF, nq, nloc, 2)
    vn_ref = np.einsum("fqbc,fc->fqb", vals, basis.EDGE_NORMALS[loc], optimize=True)
    scale = basis.EDGE_LENGTHS[loc] / mesh.flen[facets]
    return rule, vn_ref * scale[:, None, None]


def facet_coupling(broken_rt: FeSpace, facet_sp: FeSpace) -> CsrMatrix:
    """Constraint matrix <lambda, v.n>_{dT_h}: rows over facet DOFs, cols over broken RT."""
    mesh = broken_rt.mesh
    r = facet_sp.degree
    rows, cols, data = [], [], []
    all_f = np.arange(mesh.n_facets)
    for side in range(2):
        sel = all_f if side == 0 else np.nonzero(mesh.interior_mask)[0]
        rule, vn = rt_normal_trace_tab(broken_rt, sel, side)
        t = rule.points[:, 0]
        leg = basis.legendre01(r, t)
        elems = mesh.f2e[sel, side]
        # integral over the facet in arc length: flen * sum w leg vn
        blk = mesh.flen[sel, None, None] * np.einsum("q,qj,fqb->fjb", rule.weights, leg, vn,
                                                     optimize=True)
        blk[np.abs(blk) < 1e-14 * max(1.0, np.abs(blk).max())] = 0.0
        fd = facet_sp.facet_dofs[sel]
        rows.append(np.repeat(fd, broken_rt.nloc, axis=1).ravel())
        cols.append(np.tile(broken_rt.elem_dofs[elems], (1, r + 1)).ravel())
        data.append(blk.ravel())
    m = _scatter(np.concatenate(rows), np.concatenate(cols), np.concatenate(data),
                 (facet_sp.ndof, broken_rt.ndof))
    m.eliminate_zeros()
    return CsrMatrix(m)


def pressure_boundary_load(rt: FeSpace, pbar, facets: np.ndarray) -> np.ndarray:
    """Load <pbar, v.n> over the given boundary facets, against (broken or conforming) RT."""
    mesh = rt.mesh
    out = np.zeros(rt.ndof)
    if len(facets) == 0:
        return out
    rule, vn = rt_normal_trace_tab(rt, np.asarray(facets), 0)
    t = rule.points[:, 0]
    a = mesh.verts[mesh.fverts[facets, 0]]
    b = mesh.verts[mesh.fverts[facets, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    pv = np.broadcast_to(np.asarray(pbar(pts[..., 0], pts[..., 1]), dtype=float), vn.shape[:2])
    elems = mesh.f2e[facets, 0]
    vals = mesh.flen[facets, None] * np.einsum("q,fq,fqb->fb", rule.weights, pv, vn, optimize=True)
    np.add.at(out, rt.elem_dofs[elems], vals * rt.elem_signs[elems])
    return out


def tangential_boundary_load(lag: FeSpace, mbar, facets: np.ndarray) -> np.ndarray:
    """Load <n x mbar, z> over boundary facets (2D cross product n_x m_y - n_y m_x)."""
    mesh = lag.mesh
    out = np.zeros(lag.ndof)
    if len(facets) == 0:
        return out
    facets = np.asarray(facets)
    rule, (vals, _) = facet_side_tables(lag, facets, 0)
    t = rule.points[:, 0]
    a = mesh.verts[mesh.fverts[facets, 0]]
    b = mesh.verts[mesh.fverts[facets, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    mv = np.asarray(mbar(pts[..., 0], pts[..., 1]), dtype=float)
    n = mesh.fnormal[facets]
    cross = n[:, None, 0] * mv[..., 1] - n[:, None, 1] * mv[..., 0]
    elems = mesh.f2e[facets, 0]
    loads = mesh.flen[facets, None] * np.einsum("q,fq,fqb->fb", rule.weights, cross, vals, optimize=True)
    np.add.at(out, lag.elem_dofs[elems], loads)
    return out


def normal_trace_boundary_load(facet_sp: FeSpace, mbar_n, facets: np.ndarray) -> np.ndarray:
    """Moments <mbar.n, xi> on boundary facets, for the Dirichlet constraint RHS."""
    mesh = facet_sp.mesh
    out = np.zeros(facet_sp.ndof)
    if len(facets) == 0:
        return out
    facets = np.asarray(facets)
    rule = edge_rule(facet_exactness(facet_sp.degree))
    t = rule.points[:, 0]
    leg = basis.legendre01(facet_sp.degree, t)
    a = mesh.verts[mesh.fverts[facets, 0]]
    b = mesh.verts[mesh.fverts[facets, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(mbar_n(pts[..., 0], pts[..., 1], mesh.fnormal[facets]), dtype=float)
    out[facet_sp.facet_dofs[facets].ravel()] = (
        mesh.flen[facets, None] * np.einsum("q,fq,qj->fj", rule.weights, vals, leg, optimize=True)
    ).ravel()
    return out


def export_matrix_market(a: CsrMatrix, path: str) -> None:
    from scipy.io import mmwrite

    mmwrite(path, a.mat)
