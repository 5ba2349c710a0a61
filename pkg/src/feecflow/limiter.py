"""A posteriori limiting: relaxed discrete maximum principle and viscosity fields.

A candidate field is flagged on an element when some sample of it leaves the
[min, max] envelope of the previous solution over the element's neighbor
stencil, relaxed by ``delta_T = max(delta0, eta * local variation)``.
Flagged elements receive the artificial viscosity ``h_T * s_T / 2`` with
``s_T`` the local full-system wavespeed estimate; everything else keeps the
baseline (``eps_bar`` for the momentum viscosity, exactly zero for the
density and entropy diffusion so mass conservation stays exact).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis
from .spaces import FieldVec, eval_scalar


@dataclass(frozen=True)
class DmpParams:
    delta0: float = 1e-4
    eta: float = 1e-3

    def __post_init__(self):
        if self.delta0 <= 0 or self.eta <= 0:
            raise ValueError("relaxation parameters must be positive")


@dataclass
class ViscosityField:
    """Per-element artificial viscosities and the flags that produced them."""

    eps_rho: np.ndarray
    eps_m: np.ndarray
    eps_s: np.ndarray
    flags_rho: np.ndarray
    flags_s: np.ndarray


def sample_lattice(degree: int) -> np.ndarray:
    """Equispaced barycentric lattice of the given degree (includes vertices)."""
    pts = [(i / degree, j / degree) for i in range(degree + 1) for j in range(degree + 1 - i)]
    return np.array(pts)


def elem_sample_minmax(f: FieldVec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element min and max of a dP field over the sample point set."""
    vals, _ = basis.dp_tab(f.space.degree, pts)
    s = eval_scalar(f, vals)
    return s.min(axis=1), s.max(axis=1)


def stencil_bounds(wmin: np.ndarray, wmax: np.ndarray, stencils) -> tuple[np.ndarray, np.ndarray]:
    smin = np.array([wmin[st].min() for st in stencils])
    smax = np.array([wmax[st].max() for st in stencils])
    return smin, smax


def dmp_detect(w_old_min: np.ndarray, w_old_max: np.ndarray,
               w_new_min: np.ndarray, w_new_max: np.ndarray,
               stencils, params: DmpParams) -> np.ndarray:
    """Flag elements whose candidate leaves the relaxed stencil envelope."""
    smin, smax = stencil_bounds(w_old_min, w_old_max, stencils)
    delta = np.maximum(params.delta0, params.eta * (smax - smin))
    return (w_new_min < smin - delta) | (w_new_max > smax + delta)


def viscosity_from_flags(flags: np.ndarray, diameters: np.ndarray,
                         wavespeed: np.ndarray, eps_bar: float) -> np.ndarray:
    """Two-valued viscosity: h_T s_T / 2 on flagged elements, eps_bar elsewhere."""
    return np.where(flags, 0.5 * diameters * wavespeed, eps_bar)


def mood_cycle(step_fn, detect_fn, recompute_eps_fn):
    """One candidate / detect / recompute pass.

    ``step_fn(eps)`` produces a candidate result given a viscosity field (or
    None for the unlimited baseline); ``detect_fn(result)`` returns flags;
    ``recompute_eps_fn(flags)`` maps flags to the viscosity for the single
    recomputation.  Returns (result, flags, recomputed).
    """
    cand = step_fn(None)
    flags = detect_fn(cand)
    if not flags.any():
        return cand, flags, False
    return step_fn(recompute_eps_fn(flags)), flags, True
