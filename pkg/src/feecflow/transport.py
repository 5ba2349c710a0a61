"""Explicit DG operators: entropy transport and the momentum convection predictor.

The entropy equation is non-conservative; its facet coupling uses a
path-integral normal velocity (segment path, midpoint quadrature) and a
Rusanov-type dissipation with wavespeed ``s_max = max(2|u+.n|, 2|u-.n|)``.
The momentum predictor is a standard DG step with the kinetic-energy
consistent flux ``(m.n) {m/rho} + s_max/2 [m]``; a uniform state is an exact
fixed point of both operators.

Boundary facets of non-periodic meshes see an exterior state supplied by the
boundary-condition callback; entropy jumps are taken zero on the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis
from .spaces import (FeSpace, FieldVec, elem_coefs, eval_rt, eval_scalar, eval_scalar_grad,
                     facet_side_tables, facet_trace_rt, facet_trace_scalar)


class PositivityError(Exception):
    pass


@dataclass
class FacetFluxContext:
    """Traces of (rho, m, S) at facet quadrature points for a set of facets."""

    facets: np.ndarray
    weights: np.ndarray  # (nq,) reference weights on [0,1]
    normal: np.ndarray  # (nF, 2) global facet normal (side 0 outward)
    length: np.ndarray  # (nF,)
    rho: tuple[np.ndarray, np.ndarray]  # (nF, nq) per side
    m: tuple[np.ndarray, np.ndarray]  # (nF, nq, 2) per side
    s: tuple[np.ndarray, np.ndarray] | None  # entropy traces, optional


def smax(ctx: FacetFluxContext) -> np.ndarray:
    """Pointwise Rusanov wavespeed max(2|u+.n|, 2|u-.n|)."""
    for r in ctx.rho:
        if np.any(r <= 0.0):
            raise PositivityError("non-positive density trace in facet flux")
    un0 = np.einsum("fqc,fc->fq", ctx.m[0], ctx.normal) / ctx.rho[0]
    un1 = np.einsum("fqc,fc->fq", ctx.m[1], ctx.normal) / ctx.rho[1]
    return np.maximum(2.0 * np.abs(un0), 2.0 * np.abs(un1))


def roe_normal_velocity(ctx: FacetFluxContext) -> np.ndarray:
    """Segment-path normal velocity by the midpoint rule: mean(m).n / mean(rho)."""
    rho_mid = 0.5 * (ctx.rho[0] + ctx.rho[1])
    if np.any(rho_mid <= 0.0):
        raise PositivityError("non-positive path density in facet flux")
    m_mid = 0.5 * (ctx.m[0] + ctx.m[1])
    return np.einsum("fqc,fc->fq", m_mid, ctx.normal) / rho_mid


def build_flux_context(rho: FieldVec, m: FieldVec, s: FieldVec | None,
                       facets: np.ndarray, exterior=None) -> FacetFluxContext:
    """Evaluate facet traces; ``exterior`` supplies boundary states when side 2 is missing."""
    mesh = rho.space.mesh
    facets = np.asarray(facets)
    interior = mesh.f2e[facets, 1] >= 0
    rho0 = facet_trace_scalar(rho, facets, 0)
    m0 = facet_trace_rt(m, facets, 0)
    s0 = facet_trace_scalar(s, facets, 0) if s is not None else None
    if np.all(interior):
        rho1 = facet_trace_scalar(rho, facets, 1)
        m1 = facet_trace_rt(m, facets, 1)
        s1 = facet_trace_scalar(s, facets, 1) if s is not None else None
    else:
        rho1 = np.empty_like(rho0)
        m1 = np.empty_like(m0)
        s1 = np.empty_like(s0) if s0 is not None else None
        fi = facets[interior]
        rho1[interior] = facet_trace_scalar(rho, fi, 1)
        m1[interior] = facet_trace_rt(m, fi, 1)
        if s is not None:
            s1[interior] = facet_trace_scalar(s, fi, 1)
        fb = facets[~interior]
        if exterior is None:
            rho1[~interior] = rho0[~interior]
            m1[~interior] = m0[~interior]
            if s is not None:
                s1[~interior] = s0[~interior]
        else:
            rule, _ = facet_side_tables(rho.space, fb, 0)
            t = rule.points[:, 0]
            a = mesh.verts[mesh.fverts[fb, 0]]
            b = mesh.verts[mesh.fverts[fb, 1]]
            pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
            ext = exterior(fb, pts, mesh.fnormal[fb],
                           rho0[~interior], m0[~interior],
                           s0[~interior] if s0 is not None else None)
            rho1[~interior], m1[~interior] = ext[0], ext[1]
            if s is not None:
                s1[~interior] = ext[2]
    rule, _ = facet_side_tables(rho.space, facets, 0)
    return FacetFluxContext(facets=facets, weights=rule.weights,
                            normal=mesh.fnormal[facets], length=mesh.flen[facets],
                            rho=(rho0, rho1), m=(m0, m1),
                            s=(s0, s1) if s is not None else None)


def entropy_rhs(rho: FieldVec, m: FieldVec, s: FieldVec, dt: float, exterior=None) -> np.ndarray:
    """Moment vector of the explicit entropy update against the dP test basis.

    (S^n, R) - dt (m/rho . grad S, R) + dt/2 < (u_hat.n - s_max) [S], R >_{dT_h}
    with zero entropy jump on boundary facets.
    """
    sp = s.space
    mesh = sp.mesh
    rule, (vals, grads) = sp.volume_tab()
    w = rule.weights

    rho_q = eval_scalar(rho, vals)
    if np.any(rho_q <= 0.0):
        raise PositivityError("non-positive density at a volume quadrature point")
    m_q = eval_rt(m, vals_tab_rt(m.space, rule))
    grad_s = eval_scalar_grad(s, grads)
    conv = np.einsum("eqc,eqc->eq", m_q, grad_s) / rho_q

    s_q = eval_scalar(s, vals)
    integrand = s_q - dt * conv
    rhs_loc = np.einsum("q,e,eq,qi->ei", w, mesh.det_jac, integrand, vals, optimize=True)

    interior = np.nonzero(mesh.interior_mask)[0]
    if interior.size:
        ctx = build_flux_context(rho, m, s, interior, exterior)
        uhat = roe_normal_velocity(ctx)
        sm = smax(ctx)
        jump = ctx.s[0] - ctx.s[1]
        _, (tr0, _) = facet_side_tables(sp, interior, 0)
        _, (tr1, _) = facet_side_tables(sp, interior, 1)
        e0, e1 = mesh.f2e[interior, 0], mesh.f2e[interior, 1]
        # side 0 sees normal +n, jump +[S]; side 1 sees -n and -[S]
        f0 = 0.5 * dt * (uhat - sm) * jump
        f1 = 0.5 * dt * (-uhat - sm) * (-jump)
        wln = ctx.weights[None, :] * ctx.length[:, None]
        np.add.at(rhs_loc, e0, np.einsum("fq,fqi->fi", wln * f0, tr0, optimize=True))
        np.add.at(rhs_loc, e1, np.einsum("fq,fqi->fi", wln * f1, tr1, optimize=True))
    return rhs_loc.ravel()


def vals_tab_rt(rt_space: FeSpace, rule) -> np.ndarray:
    """RT reference value table aligned with a dP volume rule (cached on the space)."""
    key = ("rt_at_rule", id(rule))
    if key not in rt_space._tab_cache:
        rt_space._tab_cache[key] = basis.rt_tab(rt_space.degree, rule.points)[0]
    return rt_space._tab_cache[key]


def momentum_convect_rhs(rho: FieldVec, m: FieldVec, dt: float, exterior=None) -> np.ndarray:
    """Global RT moment vector (m^n, v) + dt (F, grad v) - dt <F_hat n, v>_{dT_h}."""
    rt = m.space
    mesh = rt.mesh
    rule, (vals, _) = rt.volume_tab()
    w = rule.weights

    rho_q = eval_scalar(rho, basis.dp_tab(rho.space.degree, rule.points)[0])
    if np.any(rho_q <= 0.0):
        raise PositivityError("non-positive density at a volume quadrature point")
    m_q = eval_rt(m, vals)
    nq, nb = vals.shape[0], vals.shape[1]

    # (m^n, v_i) = sum_q w (J^T m) . v_hat_i; detJ from dx cancels the Piola 1/detJ
    mj = np.matmul(m_q, mesh.jac) * w[None, :, None]  # (nt, nq, 2) of J^T m, weighted
    vals_flat = vals.transpose(0, 2, 1).reshape(nq * 2, nb)
    rhs_loc = mj.reshape(-1, nq * 2) @ vals_flat

    # volume flux: F_ab = u_a m_b; contract J^T F Jinv^T against reference grads
    grads = rt_grad_tab_cached(rt, rule)
    f_q = (m_q / rho_q[..., None])[..., :, None] * m_q[..., None, :]
    g_e = np.matmul(np.matmul(mesh.jac.transpose(0, 2, 1)[:, None], f_q),
                    mesh.jac_inv.transpose(0, 2, 1)[:, None])
    g_e *= w[None, :, None, None]
    grads_flat = grads.transpose(0, 2, 3, 1).reshape(nq * 4, nb)
    rhs_loc += dt * (g_e.reshape(-1, nq * 4) @ grads_flat)

    # facet flux, both sides of every facet
    allf = np.arange(mesh.n_facets)
    ctx = build_flux_context(rho, m, None, allf, exterior)
    mn = 0.5 * np.einsum("fqc,fc->fq", ctx.m[0] + ctx.m[1], ctx.normal)
    u_avg = 0.5 * (ctx.m[0] / ctx.rho[0][..., None] + ctx.m[1] / ctx.rho[1][..., None])
    sm = smax(ctx)
    wln = ctx.weights[None, :] * ctx.length[:, None]
    for side in range(2):
        sel = mesh.f2e[allf, side] >= 0
        fac = allf[sel]
        sgn = 1.0 if side == 0 else -1.0
        # flux seen by this side: (m.n_side) {u} + smax/2 (m_side - m_other)
        jump = ctx.m[side] - ctx.m[1 - side]
        flux = sgn * mn[..., None] * u_avg + 0.5 * sm[..., None] * jump
        _, (tr, _) = facet_side_tables(rt, fac, side)
        elems = mesh.f2e[fac, side]
        nqf = tr.shape[1]
        fluxj = np.matmul(flux[sel], mesh.jac[elems]) * wln[sel][..., None]  # J^T flux, weighted
        fluxj /= mesh.det_jac[elems, None, None]
        contrib = np.matmul(fluxj.reshape(-1, 1, nqf * 2),
                            tr.transpose(0, 1, 3, 2).reshape(-1, nqf * 2, tr.shape[2]))[:, 0, :]
        # orientation signs are applied once, in the final scatter
        np.add.at(rhs_loc, elems, -dt * contrib)
    # physical v = (1/detJ) J v_hat; the volume terms carry detJ from dx which cancels
    return _scatter_rt(rt, rhs_loc)


def rt_grad_tab_cached(rt_space: FeSpace, rule) -> np.ndarray:
    key = ("rt_grad_at_rule", id(rule))
    if key not in rt_space._tab_cache:
        rt_space._tab_cache[key] = basis.rt_grad_tab(rt_space.degree, rule.points)
    return rt_space._tab_cache[key]


def _scatter_rt(rt: FeSpace, rhs_loc: np.ndarray) -> np.ndarray:
    out = np.zeros(rt.ndof)
    np.add.at(out, rt.elem_dofs.ravel(), (rhs_loc * rt.elem_signs).ravel())
    return out
