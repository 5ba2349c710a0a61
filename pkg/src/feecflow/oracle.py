"""Independent reference solvers used only for verification.

``radial_solve`` integrates the radially symmetric isentropic system in
(rho, rho*u_r, S) with a MUSCL-Hancock / minmod / Rusanov scheme.  The
geometric mass source is evaluated from face-averaged fluxes, which makes the
discrete r-weighted mass telescope exactly; a Strang-split cell-centered
source would lose that.  ``dense_mixed_solve`` assembles the full coupled
vorticity-pressure-momentum linear problem and solves it by dense LU, as an
oracle for the decoupled + hybridized production path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import curl_matrix, div_matrix, divdiv_matrix, mass_matrix
from .stepper import GasLaw, eos_pressure


@dataclass
class RadialGrid:
    r_max: float
    n_cells: int
    rho: np.ndarray
    mom: np.ndarray  # rho * u_r
    s: np.ndarray
    t: float = 0.0

    @property
    def dr(self) -> float:
        return self.r_max / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dr

    def pressure(self, gas: GasLaw) -> np.ndarray:
        return eos_pressure(self.rho, self.s, gas)

    def total_mass(self) -> float:
        return float((self.rho * self.centers).sum() * self.dr)


def _minmod(a, b):
    out = np.where(np.abs(a) < np.abs(b), a, b)
    return np.where(a * b > 0, out, 0.0)


def _flux(rho, mom, p):
    u = mom / rho
    return np.stack([mom, mom * u + p])


def radial_solve(rho0, u0, p0, r_max: float, n_cells: int, t_end: float,
                 gas: GasLaw | None = None, cfl: float = 0.45) -> RadialGrid:
    """March the radial system to t_end from callable initial profiles of r."""
    gas = gas or GasLaw()
    dr = r_max / n_cells
    rc = (np.arange(n_cells) + 0.5) * dr
    rho = np.asarray(rho0(rc), dtype=float) + np.zeros(n_cells)
    u = np.asarray(u0(rc), dtype=float) + np.zeros(n_cells)
    p = np.asarray(p0(rc), dtype=float) + np.zeros(n_cells)
    if np.any(rho <= 0) or np.any(p <= 0):
        raise ValueError("radial initial data must have positive density and pressure")
    s = gas.c_v * np.log(p / rho**gas.gamma)
    mom = rho * u
    t = 0.0

    def ghosts(q, odd):
        # reflecting axis at r=0, outflow at r_max
        g = np.empty(n_cells + 4)
        g[2:-2] = q
        g[1] = -q[0] if odd else q[0]
        g[0] = -q[1] if odd else q[1]
        g[-2] = q[-1]
        g[-1] = q[-1]
        return g

    while t < t_end - 1e-14:
        pcur = eos_pressure(rho, s, gas)
        c = np.sqrt(gas.gamma * pcur / rho)
        dt = min(cfl * dr / (np.abs(mom / rho) + c).max(), t_end - t)

        g_rho = ghosts(rho, odd=False)
        g_mom = ghosts(mom, odd=True)
        g_s = ghosts(s, odd=False)

        sl = {}
        for name, g in (("rho", g_rho), ("mom", g_mom), ("s", g_s)):
            d = np.diff(g)
            sl[name] = _minmod(d[:-1], d[1:])  # slope per cell incl. one ghost each side

        # face-extrapolated states (index i covers ghost-1 .. ghost+n)
        def faces(g, slope):
            mid = g[1:-1]
            return mid - 0.5 * slope, mid + 0.5 * slope

        rl, rr = faces(g_rho, sl["rho"])
        ml, mr = faces(g_mom, sl["mom"])
        sls, srs = faces(g_s, sl["s"])

        # half-step predictor on each padded cell (conservative part + geometric source)
        rcg = np.concatenate([[-0.5 * dr], rc, [r_max + 0.5 * dr]])
        pm = eos_pressure(np.maximum(rl, 1e-14), sls, gas)
        pp = eos_pressure(np.maximum(rr, 1e-14), srs, gas)
        mid_rho, mid_mom = g_rho[1:-1], g_mom[1:-1]
        src_half = np.stack([mid_mom, mid_mom**2 / mid_rho]) / rcg
        dhalf = -0.5 * dt / dr * (_flux(rr, mr, pp) - _flux(rl, ml, pm)) - 0.5 * dt * src_half
        rl2, rr2 = rl + dhalf[0], rr + dhalf[0]
        ml2, mr2 = ml + dhalf[1], mr + dhalf[1]
        u_half = (mid_mom + dhalf[1]) / np.maximum(mid_rho + dhalf[0], 1e-14)
        s_half_l = sls - 0.5 * dt * u_half * sl["s"] / dr
        s_half_r = srs - 0.5 * dt * u_half * sl["s"] / dr

        # Rusanov fluxes at the n+1 faces between padded cells k | k+1
        rL, mL, sL = np.maximum(rr2[:-1], 1e-14), mr2[:-1], s_half_r[:-1]
        rR, mR, sR = np.maximum(rl2[1:], 1e-14), ml2[1:], s_half_l[1:]
        pL = eos_pressure(rL, sL, gas)
        pR = eos_pressure(rR, sR, gas)
        lam = np.maximum(np.abs(mL / rL) + np.sqrt(gas.gamma * pL / rL),
                         np.abs(mR / rR) + np.sqrt(gas.gamma * pR / rR))
        fhat = 0.5 * (_flux(rL, mL, pL) + _flux(rR, mR, pR)) \
            - 0.5 * lam * np.stack([rR - rL, mR - mL])

        div = (fhat[:, 1:] - fhat[:, :-1]) / dr
        # face-averaged mass flux makes sum(rho r) telescope exactly
        src_rho = 0.5 * (fhat[0, 1:] + fhat[0, :-1]) / rc
        mom_half = mid_mom[1:-1] + dhalf[1][1:-1]
        rho_half = np.maximum(mid_rho[1:-1] + dhalf[0][1:-1], 1e-14)
        src_mom = mom_half**2 / rho_half / rc
        rho_new = rho - dt * div[0] - dt * src_rho
        mom_new = mom - dt * div[1] - dt * src_mom

        # entropy: path-conservative fluctuations with half-step face states
        uhat = 0.5 * (mL / rL + mR / rR)
        smax = np.maximum(np.abs(mL / rL), np.abs(mR / rR))
        jump = sL - sR  # S drop across each face, upwind side first
        right = 0.5 * ((uhat - smax) * jump)[1:]
        left = 0.5 * ((uhat + smax) * jump)[:-1]
        s_new = s - dt * u_half[1:-1] * sl["s"][1:-1] / dr + dt / dr * (right + left)

        if np.any(rho_new <= 0):
            raise ValueError("radial oracle lost positivity")
        rho, mom, s = rho_new, mom_new, s_new
        t += dt
    return RadialGrid(r_max=r_max, n_cells=n_cells, rho=rho, mom=mom, s=s, t=t)


def sample_radial(grid: RadialGrid, radii: np.ndarray, gas: GasLaw | None = None):
    """Linear interpolation of (rho, u_r, p) at given radii."""
    gas = gas or GasLaw()
    rc = grid.centers
    rho = np.interp(radii, rc, grid.rho)
    u = np.interp(radii, rc, grid.mom / grid.rho)
    p = np.interp(radii, rc, grid.pressure(gas))
    return rho, u, p


def dense_mixed_solve(dp, rt, lag, dt: float, inv_c2, eps_m, rhs_p: np.ndarray,
                      rhs_m: np.ndarray, rhs_w: np.ndarray):
    """Dense LU of the coupled (p, m, omega) system of one Newton iteration.

    Row blocks: pressure test, momentum test (with + dt curl omega), vorticity
    test (with - (m, curl z)).  Raises on a singular system (the constant
    pressure mode when the pressure mass weight vanishes with no outflow).
    """
    mp = mass_matrix(dp, weight=inv_c2).mat.toarray()
    d = div_matrix(rt, dp).mat.toarray()
    s = divdiv_matrix(rt, eps_m).mat.toarray()
    mm = mass_matrix(rt).mat.toarray()
    c = curl_matrix(lag, rt).mat.toarray()
    mw = mass_matrix(lag, weight=1.0 / np.asarray(eps_m, dtype=float)).mat.toarray()
    np_, nm, nw = dp.ndof, rt.ndof, lag.ndof
    big = np.zeros((np_ + nm + nw, np_ + nm + nw))
    big[:np_, :np_] = mp
    big[:np_, np_:np_ + nm] = dt * d
    big[np_:np_ + nm, :np_] = -dt * d.T
    big[np_:np_ + nm, np_:np_ + nm] = mm + dt * s
    big[np_:np_ + nm, np_ + nm:] = dt * c
    big[np_ + nm:, np_:np_ + nm] = -c.T
    big[np_ + nm:, np_ + nm:] = mw
    rhs = np.concatenate([rhs_p, rhs_m, rhs_w])
    try:
        sol = np.linalg.solve(big, rhs)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("mixed system singular (constant-pressure mode)") from None
    resid = np.linalg.norm(big @ sol - rhs)
    if not np.isfinite(resid) or resid > 1e-6 * max(1.0, np.linalg.norm(rhs)):
        raise np.linalg.LinAlgError("mixed system singular (constant-pressure mode)")
    return sol[:np_], sol[np_:np_ + nm], sol[np_ + nm:]


def write_radial_csv(grid: RadialGrid, path: str, gas: GasLaw | None = None) -> None:
    gas = gas or GasLaw()
    data = np.column_stack([grid.centers, grid.rho, grid.mom / grid.rho, grid.pressure(gas)])
    np.savetxt(path, data, delimiter=",", header="r,rho,u_r,p", comments="")
