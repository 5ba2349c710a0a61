"""Semi-implicit time step: EOS, CFL, hybridized Newton solve, limiting, diagnostics.

One step runs (i) the explicit entropy stage with its maximum-principle
recomputation, (ii) the explicit momentum predictor, (iii) a Newton loop in
the pressure whose linear problem decouples into an SPD vorticity solve and a
hybridized (pressure, momentum, multiplier) solve reduced to an SPD facet
system, (iv) a density detection/recomputation pass, and (v) the density
update, which is an exact element-local statement when its diffusion is off.

With the pressure-mass weight identically zero and constant density the
Newton loop converges in a single iteration and the recovered velocity is
pointwise divergence-free; that path is exposed as ``mode="incompressible"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import basis
from .assembly import (CsrMatrix, curlcurl_matrix, mass_matrix, sip_form,
                       tangential_boundary_load)
from .limiter import (DmpParams, ViscosityField, dmp_detect, elem_sample_minmax,
                      sample_lattice, viscosity_from_flags)
from .mesh import Mesh, build_neighbor_stencils
from .quadrature import triangle_rule
from .sparsela import (BlockDiagMatrix, CholeskyFactor, NotSpdError, cg_solve, cholesky,
                       condense, solve_condensed)
from .spaces import (FeSpace, FieldVec, build_space, elem_coefs, eval_rt, eval_rt_div,
                     eval_scalar, eval_scalar_curl, eval_scalar_grad, facet_side_tables,
                     facet_trace_rt, facet_trace_scalar, interpolate, vol_exactness)
from .transport import (PositivityError, entropy_rhs, momentum_convect_rhs,
                        rt_grad_tab_cached, vals_tab_rt)


class StepFailure(Exception):
    """A sub-step failed (positivity loss, Newton stall, solver breakdown)."""


# ---------------------------------------------------------------------------
# gas law


@dataclass(frozen=True)
class GasLaw:
    gamma: float = 1.4
    c_v: float = 2.5

    def __post_init__(self):
        if self.gamma <= 1.0 or self.c_v <= 0.0:
            raise ValueError("require gamma > 1 and c_v > 0")


def eos_pressure(rho, entropy, gas: GasLaw):
    rho = np.asarray(rho)
    if np.any(rho <= 0):
        raise PositivityError("non-positive density in equation of state")
    return rho**gas.gamma * np.exp(np.asarray(entropy) / gas.c_v)


def eos_density(p, entropy, gas: GasLaw):
    p = np.asarray(p)
    if np.any(p <= 0):
        raise PositivityError("non-positive pressure in equation of state")
    return (p * np.exp(-np.asarray(entropy) / gas.c_v)) ** (1.0 / gas.gamma)


def eos_c2(p, entropy, gas: GasLaw):
    """Isentropic sound speed squared gamma p / rho(p, S)."""
    return gas.gamma * np.asarray(p) / eos_density(p, entropy, gas)


# ---------------------------------------------------------------------------
# controls and boundary conditions


@dataclass(frozen=True)
class NewtonControl:
    tol_rel: float = 1e-10
    tol_abs: float = 1e-12
    max_iters: int = 50

    def __post_init__(self):
        if self.tol_rel <= 0 or self.tol_abs <= 0 or self.max_iters < 1:
            raise ValueError("invalid Newton controls")


@dataclass
class BcEntry:
    kind: str  # 'outflow' | 'dirichlet' | 'slip'
    pbar: object = None  # callable (x, y) -> boundary pressure
    mbar: object = None  # callable (x, y) -> boundary momentum, shape (..., 2)


@dataclass
class State:
    t: float
    rho: FieldVec
    m: FieldVec
    s: FieldVec
    p: FieldVec
    omega: FieldVec

    def copy(self) -> "State":
        return State(self.t, self.rho.copy(), self.m.copy(), self.s.copy(),
                     self.p.copy(), self.omega.copy())


@dataclass
class StepReport:
    dt: float
    newton_iters: int
    flagged_s: int
    flagged_rho: int
    recomputed: bool
    halved: bool = False


def compute_dt(max_speed: float, h_min: float, cfl: float, r: int) -> float:
    """CFL step C h / ((2r+1) sigma) with sigma = max(|u|_inf, 1)."""
    sigma = max(max_speed, 1.0)
    dt = cfl * h_min / ((2 * r + 1) * sigma)
    if dt <= 0:
        raise StepFailure("non-positive time step")
    return dt


# ---------------------------------------------------------------------------
# simulation driver


@dataclass
class SimulationConfig:
    degree: int = 1
    gas: GasLaw = field(default_factory=GasLaw)
    cfl: float = 0.25
    newton: NewtonControl = field(default_factory=NewtonControl)
    dmp: DmpParams = field(default_factory=DmpParams)
    limiter: bool = True
    eps_bar: float = 1e-10
    mode: str = "compressible"  # or "incompressible"
    mu: float = 0.0  # physical viscosity (incompressible mode)
    rho_const: float = 1.0  # density in incompressible mode
    eps_rho_zero: bool = True  # keep density diffusion exactly zero (exact mass balance)
    fixed_dt: float | None = None
    dirichlet_phat: str = "pn"  # boundary pressure guess: previous trace or given pbar
    edge_stencils: bool = False  # MOOD stencil variant: facet neighbors only
    schur_cg: bool = False  # iterative Schur solves instead of direct


class Simulation:
    """Owns the spaces, cached operators, and the advance loop for one case."""

    def __init__(self, mesh: Mesh, config: SimulationConfig, bc: dict | None = None):
        self.mesh = mesh
        self.cfg = config
        self.bc = bc or {}
        r = config.degree
        self.r = r
        self.dp = build_space(mesh, "dp", r)
        self.rt = build_space(mesh, "rt", r)
        self.brt = build_space(mesh, "broken_rt", r)
        slip_tags = [t for t, e in self.bc.items() if e.kind == "slip"]
        self.lag = build_space(mesh, "lagrange", r + 1, essential_bc_tags=slip_tags)
        outflow_tags = [t for t, e in self.bc.items() if e.kind == "outflow"]
        self.lam_sp = build_space(mesh, "facet", r, essential_bc_tags=outflow_tags)
        self.stencils = build_neighbor_stencils(mesh, edge_only=config.edge_stencils)
        self.sample_pts = sample_lattice(r + 2)

        self._rt_mass = None
        self._rt_mass_factor = None
        self._schur_cache: dict = {}
        self._vort_cache: dict = {}
        self._coupling = None  # per-element constraint blocks
        self._conform_maps = None
        self._ref_ops = None
        self._eps_key = 0

        unknown = [t for t in self.bc if t not in mesh.tag_names]
        if unknown:
            raise ValueError(f"boundary tags {unknown} not present in mesh")
        covered = set()
        for t in self.bc:
            covered.update(mesh.facets_with_tag(t))
        missing = set(mesh.boundary_facets.tolist()) - covered
        if missing:
            raise ValueError(f"{len(missing)} boundary facets carry no boundary condition")

    # -- reference operators -------------------------------------------

    def _ops(self):
        if self._ref_ops is None:
            r = self.r
            rule = triangle_rule(vol_exactness(r))
            dpv, _ = basis.dp_tab(r, rule.points)
            rtv, rtd = basis.rt_tab(r, rule.points)
            dref = np.einsum("q,qi,qj->ij", rule.weights, dpv, rtd)
            sref = np.einsum("q,qi,qj->ij", rule.weights, rtd, rtd)
            jtj = np.einsum("eca,ecb->eab", self.mesh.jac, self.mesh.jac) / self.mesh.det_jac[:, None, None]
            mm = np.einsum("q,qia,eab,qjb->eij", rule.weights, rtv, jtj, rtv, optimize=True)
            self._ref_ops = dict(rule=rule, dpv=dpv, rtv=rtv, rtd=rtd, dref=dref, sref=sref, mm=mm)
        return self._ref_ops

    def _coupling_blocks(self):
        """Per-element multiplier coupling B_T and global lambda indices."""
        if self._coupling is None:
            r = self.r
            mesh = self.mesh
            from .quadrature import edge_rule
            from .spaces import facet_exactness

            erule = edge_rule(facet_exactness(r))
            t = erule.points[:, 0]
            leg = basis.legendre01(r, t)
            nloc = basis.rt_dim(r)
            bk = np.zeros((3, 2, r + 1, nloc))
            for k in range(3):
                for flip in range(2):
                    pts = basis.edge_points(k, t, bool(flip))
                    vals, _ = basis.rt_tab(r, pts)
                    vn = np.einsum("qbc,c->qb", vals, basis.EDGE_NORMALS[k])
                    bk[k, flip] = basis.EDGE_LENGTHS[k] * np.einsum(
                        "q,qj,qb->jb", erule.weights, leg, vn)
            nl = 3 * (r + 1)
            coupling = np.zeros((mesh.n_tris, nl, basis.dp_dim(r) + nloc))
            elem_lam = np.zeros((mesh.n_tris, nl), dtype=np.int64)
            nbp = basis.dp_dim(r)
            side_of = np.zeros((mesh.n_tris, 3), dtype=np.int64)
            for f in range(mesh.n_facets):
                for side in range(2):
                    e = mesh.f2e[f, side]
                    if e >= 0:
                        side_of[e, mesh.f2loc[f, side]] = side
            for k in range(3):
                f = mesh.elem_facets[:, k]
                sd = side_of[:, k]
                flip = mesh.f2flip[f, sd].astype(np.int64)
                coupling[:, k * (r + 1):(k + 1) * (r + 1), nbp:] = bk[k, flip]
                elem_lam[:, k * (r + 1):(k + 1) * (r + 1)] = self.lam_sp.facet_dofs[f]
            self._coupling = (coupling, elem_lam)
        return self._coupling

    def _conform(self, m_broken_loc: np.ndarray) -> np.ndarray:
        """Average broken facet moments into a conforming RT coefficient vector."""
        if self._conform_maps is None:
            r = self.r
            mesh = self.mesh
            degs = np.arange(r + 1)
            rows, src_e, src_i, wts = [], [], [], []
            for f in range(mesh.n_facets):
                nsides = 2 if mesh.f2e[f, 1] >= 0 else 1
                for side in range(nsides):
                    e = mesh.f2e[f, side]
                    k = mesh.f2loc[f, side]
                    sgn = 1.0 if side == 0 else -1.0
                    s = sgn * ((-1.0) ** degs if mesh.f2flip[f, side] else np.ones(r + 1))
                    rows.append(self.rt.facet_dofs[f])
                    src_e.append(np.full(r + 1, e))
                    src_i.append(k * (r + 1) + degs)
                    wts.append(s / nsides)
            self._conform_maps = (np.concatenate(rows), np.concatenate(src_e),
                                  np.concatenate(src_i), np.concatenate(wts))
        rows, se, si, wts = self._conform_maps
        out = np.zeros(self.rt.ndof)
        np.add.at(out, rows, wts * m_broken_loc[se, si])
        nbint = basis.rt_dim(self.r) - 3 * (self.r + 1)
        if nbint:
            out[self.mesh.n_facets * (self.r + 1):] = m_broken_loc[:, 3 * (self.r + 1):].ravel()
        return out

    # -- boundary data ---------------------------------------------------

    def _tagged_facets(self, kinds) -> np.ndarray:
        out = []
        for t, e in self.bc.items():
            if e.kind in kinds:
                out.append(self.mesh.facets_with_tag(t))
        return np.sort(np.concatenate(out)) if out else np.empty(0, dtype=np.int64)

    def _lambda_essential_values(self, dt: float) -> np.ndarray | None:
        """Outflow multiplier data dt * (facet moments of pbar)."""
        ess = self.lam_sp.essential_dofs
        if ess.size == 0:
            return None
        vals = np.zeros(self.lam_sp.ndof)
        for t, e in self.bc.items():
            if e.kind != "outflow":
                continue
            fac = self.mesh.facets_with_tag(t)
            pb = interpolate(self.lam_sp, e.pbar)
            dofs = self.lam_sp.facet_dofs[fac].ravel()
            vals[dofs] = dt * pb.vec[dofs]
        return vals[ess]

    def _constraint_rhs(self) -> np.ndarray:
        """Dirichlet normal data <mbar.n, xi> on boundary facets (zero elsewhere)."""
        rhs = np.zeros(self.lam_sp.ndof)
        from .assembly import normal_trace_boundary_load

        for t, e in self.bc.items():
            if e.kind != "dirichlet":
                continue
            fac = self.mesh.facets_with_tag(t)

            def mbar_n(x, y, normals, _e=e):
                mv = np.asarray(_e.mbar(x, y), dtype=float)
                return np.einsum("fqc,fc->fq", mv, normals)

            rhs += normal_trace_boundary_load(self.lam_sp, mbar_n, fac)
        return rhs

    def exterior_state(self, facets, pts, normals, rho_in, m_in, s_in):
        """Boundary exterior states for the explicit DG stages."""
        rho_out = rho_in.copy()
        m_out = m_in.copy()
        s_out = s_in.copy() if s_in is not None else None
        tags = self.mesh.btag[facets]
        for t, e in self.bc.items():
            sel = tags == self.mesh.tag_names.index(t)
            if not np.any(sel):
                continue
            if e.kind == "dirichlet" and e.mbar is not None:
                m_out[sel] = np.asarray(e.mbar(pts[sel][..., 0], pts[sel][..., 1]), dtype=float)
            elif e.kind == "slip":
                mn = np.einsum("fqc,fc->fq", m_in[sel], normals[sel])
                m_out[sel] = m_in[sel] - 2.0 * mn[..., None] * normals[sel][:, None, :]
            # outflow: copy
        return rho_out, m_out, s_out

    # -- component solves -------------------------------------------------

    def rt_mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._rt_mass_factor is None:
            self._rt_mass = mass_matrix(self.rt)
            self._rt_mass_factor = cholesky(self._rt_mass)
        return self._rt_mass_factor.solve(rhs)

    def momentum_predictor(self, state: State, dt: float) -> FieldVec:
        rhs = momentum_convect_rhs(state.rho, state.m, dt, exterior=self.exterior_state)
        return FieldVec(self.rt, self.rt_mass_solve(rhs), "m*")

    def solve_vorticity(self, mstar: FieldVec, dt: float, eps_m: np.ndarray,
                        p_prev: FieldVec) -> FieldVec:
        """Decoupled SPD vorticity solve; skipped when viscosity is the tiny baseline."""
        if np.all(eps_m <= self.cfg.eps_bar):
            return self.lag.zeros("omega")
        key = (round(dt, 15), self._eps_key)
        cached = self._vort_cache.get("factor")
        if cached is None or cached[0] != key:
            if "curlcurl" not in self._vort_cache:
                self._vort_cache["curlcurl"] = curlcurl_matrix(self.lag).mat
            a = mass_matrix(self.lag, weight=1.0 / eps_m, require_spd=True)
            a = CsrMatrix(a.mat + dt * self._vort_cache["curlcurl"], symmetric=True)
            ess = self.lag.essential_dofs
            free = np.setdiff1d(np.arange(self.lag.ndof), ess)
            afree = CsrMatrix(a.mat[np.ix_(free, free)].tocsr(), symmetric=True)
            cached = (key, cholesky(afree), free)
            self._vort_cache["factor"] = cached
        _, factor, free = cached

        rhs = self._curl_moments(mstar)
        bfac = self._tagged_facets(("dirichlet", "outflow"))
        if bfac.size:
            rhs -= dt * self._phat_load(bfac, p_prev)
        for t, e in self.bc.items():
            if e.kind in ("dirichlet", "outflow") and e.mbar is not None:
                rhs += tangential_boundary_load(self.lag, e.mbar, self.mesh.facets_with_tag(t))
        omega = np.zeros(self.lag.ndof)
        omega[free] = factor.solve(rhs[free])
        return FieldVec(self.lag, omega, "omega")

    def _curl_moments(self, m: FieldVec) -> np.ndarray:
        """(m, curl z_i) against every Lagrange basis function."""
        ops = self._ops()
        rule = ops["rule"]
        m_q = eval_rt(m, vals_tab_rt(self.rt, rule))
        key = "curl_tab_volrule"
        if key not in self._vort_cache:
            _, lg = basis.lagrange_tab(self.lag.degree, rule.points)
            curls = np.stack([lg[:, :, 1], -lg[:, :, 0]], axis=-1)
            nq, nb = curls.shape[0], curls.shape[1]
            self._vort_cache[key] = curls.transpose(0, 2, 1).reshape(nq * 2, nb)
        ct = self._vort_cache[key]
        mj = np.matmul(m_q, self.mesh.jac) * rule.weights[None, :, None]
        loc = mj.reshape(self.mesh.n_tris, -1) @ ct
        out = np.zeros(self.lag.ndof)
        np.add.at(out, self.lag.elem_dofs.ravel(), loc.ravel())
        return out

    def _phat_load(self, facets: np.ndarray, p_prev: FieldVec) -> np.ndarray:
        """<p_hat, curl z . n> on boundary facets; p_hat is pbar or the previous trace."""
        mesh = self.mesh
        rule, (vals, grads) = facet_side_tables(self.lag, facets, 0)
        t = rule.points[:, 0]
        a = mesh.verts[mesh.fverts[facets, 0]]
        b = mesh.verts[mesh.fverts[facets, 1]]
        pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
        phat = np.zeros((facets.size, rule.n))
        tags = mesh.btag[facets]
        for tg, e in self.bc.items():
            sel = tags == mesh.tag_names.index(tg)
            if not np.any(sel):
                continue
            use_pbar = e.kind == "outflow" or (self.cfg.dirichlet_phat == "pbar" and e.pbar is not None)
            if use_pbar:
                phat[sel] = np.asarray(e.pbar(pts[sel][..., 0], pts[sel][..., 1]), dtype=float)
            else:
                phat[sel] = facet_trace_scalar(p_prev, facets[sel], 0, exactness=rule.exactness)
        elems = mesh.f2e[facets, 0]
        n = mesh.fnormal[facets]
        tangent = np.stack([-n[:, 1], n[:, 0]], axis=1)
        gphys = np.einsum("ecd,fqbc->fqbd", mesh.jac_inv[elems], grads, optimize=True)
        gt = np.einsum("fqbd,fd->fqb", gphys, tangent, optimize=True)
        loads = mesh.flen[facets, None] * np.einsum("q,fq,fqb->fb", rule.weights, phat, gt,
                                                    optimize=True)
        out = np.zeros(self.lag.ndof)
        np.add.at(out, self.lag.elem_dofs[elems], loads)
        return out

    def _hybrid_pass(self, dt: float, inv_c2, rhs_p_point, b2: np.ndarray,
                     eps_m: np.ndarray, cache_key=None):
        """Assemble, condense, and solve one hybridized (p, m, lambda) system."""
        ops = self._ops()
        mesh = self.mesh
        rule, dpv = ops["rule"], ops["dpv"]
        nbp = basis.dp_dim(self.r)
        nbm = basis.rt_dim(self.r)
        k = nbp + nbm

        sysc = self._schur_cache.get(cache_key) if cache_key is not None else None
        if sysc is None:
            tkey = ("blocks", round(dt, 15), self._eps_key)
            tmpl = self._schur_cache.get(tkey)
            if tmpl is None:
                mtot = ops["mm"] + (dt * eps_m / mesh.det_jac)[:, None, None] * ops["sref"]
                tmpl = np.zeros((mesh.n_tris, k, k))
                tmpl[:, :nbp, nbp:] = dt * ops["dref"][None]
                tmpl[:, nbp:, :nbp] = dt * ops["dref"].T[None]
                tmpl[:, nbp:, nbp:] = -mtot
                self._schur_cache[tkey] = tmpl
            blocks = tmpl.copy()
            if np.isscalar(inv_c2) and inv_c2 == 0.0:
                incompressible = True
            else:
                wq = rule.weights[None, :] * inv_c2 * mesh.det_jac[:, None]
                blocks[:, :nbp, :nbp] = np.matmul(dpv.T[None] * wq[:, None, :], dpv)
                incompressible = False
            coupling, elem_lam = self._coupling_blocks()
            ess = self.lam_sp.essential_dofs
            sysc = condense(BlockDiagMatrix(blocks), elem_lam, coupling, self.lam_sp.ndof,
                            ess=ess, pin_kernel=incompressible and ess.size == 0)
            if cache_key is not None:
                if len(self._schur_cache) > 2:
                    self._schur_cache.clear()
                self._schur_cache[cache_key] = sysc

        if np.isscalar(rhs_p_point):
            rhs_p_point = np.full((mesh.n_tris, rule.n), float(rhs_p_point))
        b1 = (rule.weights[None, :] * rhs_p_point * mesh.det_jac[:, None]) @ dpv
        rhs_local = np.concatenate([b1, b2], axis=1)
        lam_ess = self._lambda_essential_values(dt)
        x, lam = solve_condensed(sysc, rhs_local, self._constraint_rhs(), lam_ess,
                                 use_cg=self.cfg.schur_cg)
        p = FieldVec(self.dp, x[:, :nbp].ravel().copy(), "p")
        return p, x[:, nbp:], lam

    def _momentum_moments(self, m_q: np.ndarray) -> np.ndarray:
        """(w, v_i) for a vector field sampled at the volume rule, against broken RT."""
        ops = self._ops()
        w = ops["rule"].weights
        rtv = ops["rtv"]
        nq, nb = rtv.shape[0], rtv.shape[1]
        mj = np.matmul(m_q, self.mesh.jac) * w[None, :, None]
        return mj.reshape(-1, nq * 2) @ rtv.transpose(0, 2, 1).reshape(nq * 2, nb)

    def newton_solve(self, state: State, s_new: FieldVec, mstar: FieldVec, dt: float,
                     eps_m: np.ndarray, ctl: NewtonControl | None = None,
                     p_init: FieldVec | None = None):
        """Newton loop in the pressure; returns (p, m, omega, iterations)."""
        ctl = ctl or self.cfg.newton
        cfg = self.cfg
        ops = self._ops()
        rule = ops["rule"]
        incompressible = cfg.mode == "incompressible"

        omega = self.solve_vorticity(mstar, dt, eps_m, state.p)
        mstar_q = eval_rt(mstar, vals_tab_rt(self.rt, rule))
        b2 = -self._momentum_moments(mstar_q)
        if np.any(omega.vec):
            _, lg = basis.lagrange_tab(self.lag.degree, rule.points)
            curl_w = eval_scalar_curl(omega, lg)
            b2 += dt * self._momentum_moments(curl_w)

        if incompressible:
            cache_key = ("inc", round(dt, 15), self._eps_key)
            p, m_loc, _ = self._hybrid_pass(dt, 0.0, 0.0, b2, eps_m, cache_key=cache_key)
            m = FieldVec(self.rt, self._conform(m_loc), "m")
            return p, m, omega, 1

        dpv = ops["dpv"]
        rho_n_q = eval_scalar(state.rho, dpv)
        s_q = eval_scalar(s_new, dpv)
        p_l = (p_init.vec if p_init is not None else state.p.vec).copy()
        gas = cfg.gas
        nbp = basis.dp_dim(self.r)
        phi0 = basis.dp_tab(self.r, np.zeros((1, 2)))[0][0, 0]
        for l in range(ctl.max_iters):
            p_coefs = p_l.reshape(self.mesh.n_tris, nbp)
            p_mean = p_coefs[:, 0] * phi0
            if np.any(p_mean <= 0):
                raise StepFailure("non-positive mean pressure iterate")
            p_l_q = p_coefs @ dpv.T
            # coefficient evaluations tolerate pointwise undershoots near
            # discontinuities: clamp to a fraction of the cell mean
            p_eval = np.maximum(p_l_q, 1e-3 * p_mean[:, None])
            rho_l_q = rho_n_q if l == 0 else eos_density(p_eval, s_q, gas)
            inv_c2 = eos_density(p_eval, s_q, gas) / (gas.gamma * p_eval)
            rhs_point = rho_n_q - rho_l_q + inv_c2 * p_l_q
            p_new, m_loc, _ = self._hybrid_pass(dt, inv_c2, rhs_point, b2, eps_m)
            dp_norm = np.linalg.norm(p_new.vec - p_l)
            pnorm = np.linalg.norm(p_l)
            p_l = p_new.vec
            if dp_norm <= ctl.tol_rel * pnorm + ctl.tol_abs:
                m = FieldVec(self.rt, self._conform(m_loc), "m")
                return FieldVec(self.dp, p_l, "p"), m, omega, l + 1
        raise StepFailure(f"Newton did not converge in {ctl.max_iters} iterations")

    def density_update(self, rho_n: FieldVec, m_new: FieldVec, dt: float, eps_rho) -> FieldVec:
        """(rho, q) + dt a_eps(rho, q) = (rho^n, q) - dt (div m, q); exact when eps = 0."""
        div_coef = self.div_to_dp(m_new)
        eps_rho = np.broadcast_to(np.asarray(eps_rho, dtype=float), (self.mesh.n_tris,))
        new = rho_n.vec - dt * div_coef
        if not np.any(eps_rho > 0):
            return FieldVec(self.dp, new, "rho")
        a = sip_form(self.dp, eps_rho)
        mass_diag = np.repeat(self.mesh.det_jac, basis.dp_dim(self.r))
        lhs = CsrMatrix(sp.diags(mass_diag).tocsr() + dt * a.mat, symmetric=True)
        rhs = mass_diag * new
        vec = cg_solve(lhs, rhs, tol=1e-13, x0=new)
        return FieldVec(self.dp, vec, "rho")

    def div_to_dp(self, m: FieldVec) -> np.ndarray:
        """Exact dP coefficients of div m (the divergence lands in dP_r)."""
        ops = self._ops()
        coefs = elem_coefs(m)
        return (np.einsum("ij,ej->ei", ops["dref"], coefs) / self.mesh.det_jac[:, None]).ravel()

    def entropy_solve(self, state: State, dt: float, eps_s) -> FieldVec:
        rhs = entropy_rhs(state.rho, state.m, state.s, dt, exterior=self.exterior_state)
        eps_s = np.broadcast_to(np.asarray(eps_s, dtype=float), (self.mesh.n_tris,))
        mass_diag = np.repeat(self.mesh.det_jac, basis.dp_dim(self.r))
        if not np.any(eps_s > 0):
            return FieldVec(self.dp, rhs / mass_diag, "S")
        a = sip_form(self.dp, eps_s)
        lhs = CsrMatrix(sp.diags(mass_diag).tocsr() + dt * a.mat, symmetric=True)
        vec = cg_solve(lhs, rhs, tol=1e-13, x0=rhs / mass_diag)
        return FieldVec(self.dp, vec, "S")

    # -- wavespeed and dt --------------------------------------------------

    def element_wavespeed(self, state: State) -> np.ndarray:
        """Max of |u.n| + c over each element's facet quadrature points."""
        mesh = self.mesh
        allf = np.arange(mesh.n_facets)
        out = np.zeros(mesh.n_tris)
        for side in range(2):
            sel = mesh.f2e[allf, side] >= 0
            fac = allf[sel]
            rho = facet_trace_scalar(state.rho, fac, side)
            m = facet_trace_rt(state.m, fac, side)
            if self.cfg.mode == "incompressible":
                c = np.zeros_like(rho)
            else:
                p = facet_trace_scalar(state.p, fac, side)
                c = np.sqrt(self.cfg.gas.gamma * np.maximum(p, 1e-300) / np.maximum(rho, 1e-300))
            un = np.abs(np.einsum("fqc,fc->fq", m, mesh.fnormal[fac])) / np.maximum(rho, 1e-300)
            ws = (un + c).max(axis=1)
            np.maximum.at(out, mesh.f2e[fac, side], ws)
        return out

    def max_speed(self, state: State) -> float:
        rule, (dpv, _) = self.dp.volume_tab()
        rho_q = eval_scalar(state.rho, dpv)
        m_q = eval_rt(state.m, vals_tab_rt(self.rt, rule))
        return float((np.linalg.norm(m_q, axis=2) / np.maximum(rho_q, 1e-300)).max())

    def pick_dt(self, state: State) -> float:
        if self.cfg.fixed_dt is not None:
            return self.cfg.fixed_dt
        return compute_dt(self.max_speed(state), float(self.mesh.diameters.min()),
                          self.cfg.cfl, self.r)

    # -- full step ---------------------------------------------------------

    def advance(self, state: State, dt: float | None = None) -> tuple[State, StepReport]:
        """One full step with the detection/recomputation pipeline and a failsafe retry."""
        dt = self.pick_dt(state) if dt is None else dt
        try:
            return self._advance_once(state, dt, force_full_viscosity=False)
        except (StepFailure, PositivityError, NotSpdError):
            new, rep = self._advance_once(state, 0.5 * dt, force_full_viscosity=True)
            return new, replace(rep, halved=True)

    def _advance_once(self, state: State, dt: float, force_full_viscosity: bool):
        cfg = self.cfg
        mesh = self.mesh
        incompressible = cfg.mode == "incompressible"
        ws = None if incompressible else self.element_wavespeed(state)
        full_eps = None
        if force_full_viscosity and not incompressible:
            full_eps = 0.5 * mesh.diameters * ws

        flagged_s = 0
        if incompressible:
            s_new = state.s
        else:
            old_min, old_max = elem_sample_minmax(state.s, self.sample_pts)
            cand = self.entropy_solve(state, dt, 0.0 if full_eps is None else full_eps)
            if cfg.limiter and full_eps is None:
                new_min, new_max = elem_sample_minmax(cand, self.sample_pts)
                flags = dmp_detect(old_min, old_max, new_min, new_max, self.stencils, cfg.dmp)
                flagged_s = int(flags.sum())
                if flagged_s:
                    eps_s = viscosity_from_flags(flags, mesh.diameters, ws, 0.0)
                    cand = self.entropy_solve(state, dt, eps_s)
            s_new = FieldVec(self.dp, cand.vec, "S")

        mstar = self.momentum_predictor(state, dt)

        if incompressible:
            eps_m = np.full(mesh.n_tris, max(cfg.eps_bar, cfg.mu / cfg.rho_const))
            self._set_eps_key(eps_m)
            p, m, omega, iters = self.newton_solve(state, s_new, mstar, dt, eps_m)
            new = State(state.t + dt, state.rho, m, s_new, p, omega)
            return new, StepReport(dt, iters, 0, 0, False)

        base_eps_m = np.full(mesh.n_tris, cfg.eps_bar) if full_eps is None else full_eps
        self._set_eps_key(base_eps_m)
        p, m, omega, iters = self.newton_solve(state, s_new, mstar, dt, base_eps_m)
        rho_cand = self.density_update(state.rho, m, dt, 0.0)

        flagged_rho = 0
        recomputed = False
        if cfg.limiter and full_eps is None:
            old_min, old_max = elem_sample_minmax(state.rho, self.sample_pts)
            new_min, new_max = elem_sample_minmax(rho_cand, self.sample_pts)
            flags = dmp_detect(old_min, old_max, new_min, new_max, self.stencils, cfg.dmp)
            flagged_rho = int(flags.sum())
            if flagged_rho:
                eps_f = viscosity_from_flags(flags, mesh.diameters, ws, cfg.eps_bar)
                self._set_eps_key(eps_f)
                p, m, omega, iters = self.newton_solve(state, s_new, mstar, dt, eps_f, p_init=p)
                eps_rho = 0.0 if cfg.eps_rho_zero else np.where(flags, eps_f, 0.0)
                rho_cand = self.density_update(state.rho, m, dt, eps_rho)
                recomputed = True

        self._check_positive(rho_cand)
        new = State(state.t + dt, rho_cand, m, s_new, p, omega)
        return new, StepReport(dt, iters, flagged_s, flagged_rho, recomputed)

    def _set_eps_key(self, eps: np.ndarray):
        key = hash(eps.tobytes())
        if key != self._eps_key:
            self._eps_key = key
            self._vort_cache.pop("factor", None)

    def _check_positive(self, rho: FieldVec):
        vmin, _ = elem_sample_minmax(rho, _check_points(self))
        if np.any(vmin <= 0):
            raise StepFailure("non-positive density after update")

    # -- diagnostics ---------------------------------------------------------

    def diagnostics(self, state: State) -> dict:
        mesh = self.mesh
        rule, (dpv, dpg) = self.dp.volume_tab()
        w = rule.weights
        rho_q = eval_scalar(state.rho, dpv)
        m_q = eval_rt(state.m, vals_tab_rt(self.rt, rule))
        div_q = eval_rt_div(state.m, basis.rt_tab(self.r, rule.points)[1])
        wd = w[None, :] * mesh.det_jac[:, None]
        mass = float((wd * rho_q).sum())
        mom = (wd[..., None] * m_q).sum(axis=(0, 1))
        energy = 0.5 * float((wd * (m_q**2).sum(axis=2) / rho_q).sum())
        if self.cfg.mode == "incompressible":
            div_u = div_q / self.cfg.rho_const
            mach = 0.0
        else:
            grad_rho = eval_scalar_grad(state.rho, dpg)
            u_q = m_q / rho_q[..., None]
            div_u = (div_q - np.einsum("eqc,eqc->eq", u_q, grad_rho)) / rho_q
            p_q = eval_scalar(state.p, dpv)
            c = np.sqrt(self.cfg.gas.gamma * p_q / rho_q)
            mach = float((np.linalg.norm(m_q, axis=2) / rho_q / c).max())
        return dict(t=state.t, mass=mass, momentum_x=float(mom[0]), momentum_y=float(mom[1]),
                    energy=energy, div_l2=float(np.sqrt((wd * div_u**2).sum())),
                    div_linf=float(np.abs(div_u).max()), mach=mach)


def _check_points(sim: Simulation) -> np.ndarray:
    """Every reference point the solver evaluates fields at (volume, traces, samples)."""
    key = "check_points"
    if key not in sim.dp._tab_cache:
        from .quadrature import edge_rule
        from .spaces import facet_exactness

        pts = [sim.dp.volume_tab()[0].points, sim.sample_pts]
        t = edge_rule(facet_exactness(sim.r)).points[:, 0]
        for k in range(3):
            pts.append(basis.edge_points(k, t))
        sim.dp._tab_cache[key] = np.vstack(pts)
    return sim.dp._tab_cache[key]


def positivity_floor(sim: Simulation, f: FieldVec) -> FieldVec:
    """Flatten a dP field to its (positive) cell mean where samples dip to zero.

    Projections of discontinuous data undershoot on cut cells; dropping the
    higher modes there keeps the element mean, hence mass, exactly.
    """
    vmin, _ = elem_sample_minmax(f, _check_points(sim))
    bad = vmin <= 0.0
    if bad.any():
        coef = f.vec.reshape(sim.mesh.n_tris, -1)
        coef[bad, 1:] = 0.0
        if np.any(coef[bad, 0] <= 0.0):
            raise PositivityError(f"initial {f.label or 'field'} has non-positive cell means")
    return f


def make_state(sim: Simulation, rho_fn, u_fn, p_fn=None, s_fn=None, t: float = 0.0) -> State:
    """Interpolate initial data; entropy derived from (rho, p) unless given.

    Density and pressure are positivity-floored cell-wise, which matters only
    for discontinuous data such as the circular-explosion initial condition.
    """
    gas = sim.cfg.gas

    def _scal(fn):
        return lambda x, y: np.broadcast_to(np.asarray(fn(x, y), dtype=float), np.shape(x)).copy()

    rho_fn = _scal(rho_fn)
    rho = interpolate(sim.dp, rho_fn, "rho")
    m = interpolate(sim.rt, lambda x, y: rho_fn(x, y)[..., None] * np.asarray(u_fn(x, y)), "m")
    if sim.cfg.mode == "incompressible":
        p = interpolate(sim.dp, _scal(p_fn) if p_fn is not None else (lambda x, y: 0.0 * x), "p")
        s = sim.dp.zeros("S")
    else:
        if s_fn is None:
            if p_fn is None:
                raise ValueError("compressible initial data needs p or S")
            pf = _scal(p_fn)
            s_fn = lambda x, y: gas.c_v * np.log(pf(x, y) / rho_fn(x, y) ** gas.gamma)
        s = interpolate(sim.dp, _scal(s_fn), "S")
        p = interpolate(sim.dp, _scal(p_fn) if p_fn is not None else
                        (lambda x, y: eos_pressure(rho_fn(x, y), s_fn(x, y), gas)), "p")
        positivity_floor(sim, rho)
        positivity_floor(sim, p)
    return State(t, rho, m, s, p, sim.lag.zeros("omega"))
