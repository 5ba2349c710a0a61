"""Quadrature rules on the reference triangle and the unit interval.

The reference triangle is {(x, y) : x >= 0, y >= 0, x + y <= 1}.  Triangle
rules are built from a tensor Gauss-Legendre rule on the unit square mapped
through the Duffy transform and then symmetrized over the three cyclic
vertex rotations, which keeps all weights positive at every degree.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_EXACTNESS = 14


@dataclass(frozen=True)
class QuadRule:
    """Quadrature points and weights with a stated polynomial exactness."""

    points: np.ndarray  # (nq, dim) reference coordinates
    weights: np.ndarray  # (nq,)
    exactness: int

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def _gauss01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule with n points on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def edge_rule(exactness: int) -> QuadRule:
    """Gauss rule on [0, 1] integrating polynomials up to `exactness` exactly."""
    if not 0 <= exactness <= MAX_EXACTNESS:
        raise ValueError(f"edge rule exactness {exactness} outside supported range [0, {MAX_EXACTNESS}]")
    n = exactness // 2 + 1
    s, w = _gauss01(n)
    return QuadRule(points=s.reshape(-1, 1), weights=w, exactness=exactness)


@lru_cache(maxsize=None)
def triangle_rule(exactness: int) -> QuadRule:
    """Symmetric positive rule on the reference triangle.

    Exact (to roundoff) for all bivariate polynomials of total degree up to
    `exactness`; the weights sum to the reference area 1/2.
    """
    if not 0 <= exactness <= MAX_EXACTNESS:
        raise ValueError(f"triangle rule exactness {exactness} outside supported range [0, {MAX_EXACTNESS}]")
    # Duffy map (u, v) -> (u, v(1-u)) has Jacobian (1-u); a degree-d integrand
    # becomes degree d+1 in u and d in v.
    nu = (exactness + 2) // 2 + 1
    nv = (exactness + 1) // 2 + 1
    u, wu = _gauss01(nu)
    v, wv = _gauss01(nv)
    U, V = np.meshgrid(u, v, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel()

    # Symmetrize over the cyclic barycentric rotations (l1,l2,l3)->(l3,l1,l2);
    # in (x, y) coordinates: (x, y) -> (1-x-y, x) -> (y, 1-x-y).
    pts = np.concatenate(
        [
            np.column_stack([x, y]),
            np.column_stack([1.0 - x - y, x]),
            np.column_stack([y, 1.0 - x - y]),
        ]
    )
    wts = np.concatenate([w, w, w]) / 3.0
    return QuadRule(points=pts, weights=wts, exactness=exactness)


def reference_triangle_monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
