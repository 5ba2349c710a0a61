import numpy as np
import pytest

from feecflow import basis
from feecflow.mesh import generate_rect_mesh
from feecflow.spaces import (_phys_points, build_space, elem_coefs, eval_at_points, eval_rt,
                             eval_rt_div, eval_scalar, eval_scalar_curl, facet_trace_rt,
                             interpolate)

CURL_PAIRS = {
    0: (lambda x, y: x * y, lambda x, y: np.stack([x, -y], -1)),
    1: (lambda x, y: x**2 * y, lambda x, y: np.stack([x**2, -2 * x * y], -1)),
    2: (lambda x, y: x**3 + x * y**2, lambda x, y: np.stack([2 * x * y, -3 * x**2 - y**2], -1)),
}


@pytest.fixture(scope="module")
def mesh():
    return generate_rect_mesh(3, 3, jitter=0.15, seed=3)


def test_dof_counts(mesh):
    m8 = generate_rect_mesh(2, 2)
    assert build_space(m8, "dp", 1).ndof == 24
    mp = generate_rect_mesh(1, 1, periodic_x=True, periodic_y=True)
    assert build_space(mp, "rt", 0).ndof == 3
    assert build_space(m8, "lagrange", 2).ndof == 25  # V + E = 9 + 16
    assert build_space(mesh, "rt", 2).ndof == mesh.n_facets * 3 + mesh.n_tris * 6
    assert build_space(mesh, "broken_rt", 1).ndof == mesh.n_tris * 8
    assert build_space(mesh, "facet", 2).ndof == mesh.n_facets * 3


def test_unsupported_degree(mesh):
    with pytest.raises(ValueError):
        build_space(mesh, "dp", 3)
    with pytest.raises(ValueError):
        build_space(mesh, "lagrange", 4)
    with pytest.raises(ValueError):
        build_space(mesh, "nope", 1)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_dp_projection_reproduces_polynomials(r, mesh):
    dp = build_space(mesh, "dp", r)
    fn = lambda x, y: x**r + 0.5 * y ** min(r, 1) + 1.0
    f = interpolate(dp, fn)
    rule, (v, _) = dp.volume_tab()
    pts = _phys_points(mesh, rule.points)
    assert abs(eval_scalar(f, v) - fn(pts[..., 0], pts[..., 1])).max() < 1e-12


@pytest.mark.parametrize("r", [0, 1, 2])
def test_rt_constants_pointwise(r, mesh):
    rt = build_space(mesh, "rt", r)
    f = interpolate(rt, lambda x, y: np.stack([np.ones_like(x), 0.5 * np.ones_like(x)], -1))
    got = eval_rt(f, rt.volume_tab()[1][0])
    assert abs(got - np.array([1.0, 0.5])).max() < 1e-12


@pytest.mark.parametrize("r", [0, 1, 2])
def test_rt_normal_continuity(r, mesh):
    rt = build_space(mesh, "rt", r)
    g = interpolate(rt, lambda x, y: np.stack([np.sin(x + 2 * y), np.cos(3 * x - y)], -1))
    inter = np.nonzero(mesh.interior_mask)[0]
    jump = np.einsum("fqc,fc->fq",
                     facet_trace_rt(g, inter, 0) - facet_trace_rt(g, inter, 1),
                     mesh.fnormal[inter])
    assert abs(jump).max() < 1e-12


@pytest.mark.parametrize("r", [0, 1, 2])
def test_rt_normal_continuity_periodic(r):
    m = generate_rect_mesh(5, 5, (0, 0, 1, 1), jitter=0.2, seed=11,
                           periodic_x=True, periodic_y=True)
    rt = build_space(m, "rt", r)
    g = interpolate(rt, lambda x, y: np.stack(
        [np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y), np.cos(2 * np.pi * x)], -1))
    allf = np.arange(m.n_facets)
    jump = np.einsum("fqc,fc->fq",
                     facet_trace_rt(g, allf, 0) - facet_trace_rt(g, allf, 1), m.fnormal)
    assert abs(jump).max() < 1e-10


@pytest.mark.parametrize("r", [0, 1, 2])
def test_curl_inclusion(r, mesh):
    """curl of Lagrange_{r+1} interpolates exactly into RT_r (polynomial cases)."""
    zf, cf = CURL_PAIRS[r]
    lg = build_space(mesh, "lagrange", r + 1)
    rt = build_space(mesh, "rt", r)
    z = interpolate(lg, zf)
    rule, (_, lgr) = lg.volume_tab()
    curl_q = eval_scalar_curl(z, lgr)
    w = interpolate(rt, cf)
    rv, rd = basis.rt_tab(r, rule.points)
    assert abs(eval_rt(w, rv) - curl_q).max() < 1e-11
    # the exact sequence: div curl = 0
    assert abs(eval_rt_div(w, rd)).max() < 1e-11


@pytest.mark.parametrize("r", [0, 1, 2])
def test_div_rt_lies_in_dp(r, mesh):
    rt = build_space(mesh, "rt", r)
    dp = build_space(mesh, "dp", r)
    g = interpolate(rt, lambda x, y: np.stack([np.sin(x + y), np.cos(x * y)], -1))
    rule, (dpv, _) = dp.volume_tab()
    div_q = eval_rt_div(g, basis.rt_tab(r, rule.points)[1])
    # project the divergence into dP and compare pointwise: residual ~ 0
    coef = np.einsum("q,eq,qi->ei", rule.weights, div_q, dpv)
    back = coef @ dpv.T
    assert abs(back - div_q).max() < 1e-12


def test_essential_dofs():
    m = generate_rect_mesh(3, 3)
    rt = build_space(m, "rt", 1, essential_bc_tags=("left",))
    lf = m.facets_with_tag("left")
    assert set(rt.essential_dofs) == set(rt.facet_dofs[lf].ravel())
    lg = build_space(m, "lagrange", 2, essential_bc_tags=("left", "top"))
    # 4 vertices + 3 edge nodes per side, shared corner counted once
    assert len(lg.essential_dofs) == 7 + 6
    lam = build_space(m, "facet", 0, essential_bc_tags=("bottom",))
    assert len(lam.essential_dofs) == 3


def test_lagrange_interpolation_nodal(mesh):
    lg = build_space(mesh, "lagrange", 3)
    fn = lambda x, y: 1.0 + 2 * x - y + x * y + 0.3 * x**3
    z = interpolate(lg, fn)
    rule, (v, _) = lg.volume_tab()
    pts = _phys_points(mesh, rule.points)
    assert abs(eval_scalar(z, v) - fn(pts[..., 0], pts[..., 1])).max() < 1e-11


def test_taylor_green_rt_interpolation_order():
    """RT_1 interpolation error of the Taylor-Green velocity decays at order 2."""
    vel = lambda x, y: np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)], -1)
    errs = []
    for n in (10, 20, 40):
        m = generate_rect_mesh(n, n, (0, 0, 2 * np.pi, 2 * np.pi), jitter=0.1, seed=1000 + n,
                               periodic_x=True, periodic_y=True, diagonal="alternate")
        rt = build_space(m, "rt", 1)
        f = interpolate(rt, vel)
        rule = rt.volume_tab()[0]
        pts = _phys_points(m, rule.points)
        diff = eval_rt(f, rt.volume_tab()[1][0]) - vel(pts[..., 0], pts[..., 1])
        wd = rule.weights[None, :] * m.det_jac[:, None]
        errs.append(np.sqrt((wd * (diff**2).sum(-1)).sum()))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert orders.min() > 1.8, (errs, orders)


def test_point_evaluation(mesh):
    dp = build_space(mesh, "dp", 2)
    fn = lambda x, y: x**2 - y + 0.5
    f = interpolate(dp, fn)
    pts = np.array([[0.31, 0.47], [0.92, 0.18], [0.5, 0.5]])
    assert abs(eval_at_points(f, pts) - fn(pts[:, 0], pts[:, 1])).max() < 1e-11
    rt = build_space(mesh, "rt", 1)
    g = interpolate(rt, lambda x, y: np.stack([x, y], -1))
    got = eval_at_points(g, pts)
    assert abs(got - pts).max() < 1e-11
