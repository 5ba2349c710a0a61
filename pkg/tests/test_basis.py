import numpy as np
import pytest

from feecflow import basis
from feecflow.quadrature import edge_rule, triangle_rule


@pytest.mark.parametrize("r", [0, 1, 2])
def test_dp_orthonormal(r):
    q = triangle_rule(2 * r + 2)
    v, _ = basis.dp_tab(r, q.points)
    gram = np.einsum("q,qi,qj->ij", q.weights, v, v)
    assert np.allclose(gram, np.eye(basis.dp_dim(r)), atol=1e-13)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_rt_duality(r):
    """Canonical functionals evaluate to the identity on the dual basis."""
    ndof = basis.rt_dim(r)
    er = edge_rule(2 * (r + 1))
    t = er.points[:, 0]
    leg = basis.legendre01(r, t)
    n_mat = np.zeros((ndof, ndof))
    row = 0
    for k in range(3):
        vals, _ = basis.rt_tab(r, basis.edge_points(k, t))
        vn = vals @ basis.EDGE_NORMALS[k]
        for j in range(r + 1):
            n_mat[row] = basis.EDGE_LENGTHS[k] * np.einsum("q,qb->b", er.weights * leg[:, j], vn)
            row += 1
    if r >= 1:
        tr = triangle_rule(2 * (r + 1))
        vals, _ = basis.rt_tab(r, tr.points)
        iv, _ = basis.dp_tab(r - 1, tr.points)
        for j in range(basis.dp_dim(r - 1)):
            for c in range(2):
                n_mat[row] = np.einsum("q,qb->b", tr.weights * iv[:, j], vals[:, :, c])
                row += 1
    assert np.allclose(n_mat, np.eye(ndof), atol=1e-11)


def test_rt0_constant_divergence():
    q = triangle_rule(4)
    _, dv = basis.rt_tab(0, q.points)
    assert np.allclose(dv, dv[:1, :], atol=1e-13)


@pytest.mark.parametrize("r", [1, 2])
def test_rt_divergence_consistent(r):
    """Tabulated divergence matches finite differences of the values."""
    pts = triangle_rule(4).points * 0.8 + 0.05
    h = 1e-6
    _, dv = basis.rt_tab(r, pts)
    vx1, _ = basis.rt_tab(r, pts + [h, 0])
    vx0, _ = basis.rt_tab(r, pts - [h, 0])
    vy1, _ = basis.rt_tab(r, pts + [0, h])
    vy0, _ = basis.rt_tab(r, pts - [0, h])
    fd = (vx1[:, :, 0] - vx0[:, :, 0] + vy1[:, :, 1] - vy0[:, :, 1]) / (2 * h)
    assert abs(fd - dv).max() < 1e-5


@pytest.mark.parametrize("r", [0, 1, 2])
def test_rt_normal_trace_locality(r):
    """Normal traces vanish on edges other than a DOF's own edge."""
    t = edge_rule(2 * (r + 1)).points[:, 0]
    for k in range(3):
        vals, _ = basis.rt_tab(r, basis.edge_points(k, t))
        vn = vals @ basis.EDGE_NORMALS[k]
        own = slice(k * (r + 1), (k + 1) * (r + 1))
        other = np.ones(basis.rt_dim(r), dtype=bool)
        other[own] = False
        assert abs(vn[:, other]).max() < 1e-10


@pytest.mark.parametrize("d", [1, 2, 3])
def test_lagrange_partition_of_unity(d):
    q = triangle_rule(6)
    v, _ = basis.lagrange_tab(d, q.points)
    assert np.allclose(v.sum(axis=1), 1.0, atol=1e-13)


def test_legendre_flip_parity():
    t = np.linspace(0, 1, 7)
    leg = basis.legendre01(2, t)
    flipped = basis.legendre01(2, 1 - t)
    signs = (-1.0) ** np.arange(3)
    assert np.allclose(flipped, leg * signs, atol=1e-13)


def test_rt_gradients_consistent():
    pts = triangle_rule(3).points * 0.7 + 0.1
    h = 1e-6
    g = basis.rt_grad_tab(1, pts)
    for comp in range(2):
        v1, _ = basis.rt_tab(1, pts + np.eye(2)[comp] * h)
        v0, _ = basis.rt_tab(1, pts - np.eye(2)[comp] * h)
        fd = (v1 - v0) / (2 * h)
        assert abs(fd - g[:, :, :, comp]).max() < 1e-5
