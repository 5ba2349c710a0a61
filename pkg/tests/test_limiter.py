import numpy as np
import pytest

from feecflow.limiter import (DmpParams, dmp_detect, elem_sample_minmax, mood_cycle,
                              sample_lattice, stencil_bounds, viscosity_from_flags)
from feecflow.mesh import build_neighbor_stencils, generate_rect_mesh
from feecflow.spaces import build_space, interpolate
from feecflow.stepper import Simulation, SimulationConfig, make_state


@pytest.fixture(scope="module")
def setup():
    mesh = generate_rect_mesh(6, 6, jitter=0.1, seed=4, periodic_x=True, periodic_y=True)
    return mesh, build_neighbor_stencils(mesh)


def test_params_validated():
    assert DmpParams().delta0 == 1e-4 and DmpParams().eta == 1e-3
    with pytest.raises(ValueError):
        DmpParams(delta0=0.0)


def test_sample_lattice_contains_vertices():
    pts = sample_lattice(3)
    assert pts.shape == (10, 2)
    for v in [(0, 0), (1, 0), (0, 1)]:
        assert any(np.allclose(p, v) for p in pts)


def test_constant_field_unflagged(setup):
    mesh, st = setup
    n = mesh.n_tris
    w = np.full(n, 2.5)
    flags = dmp_detect(w, w, w + 1e-13, w + 1e-13, st, DmpParams())
    assert not flags.any()


def test_smooth_convected_field_unflagged():
    """A linear field shifted by a fraction of a cell stays inside the envelope."""
    mesh = generate_rect_mesh(6, 6, jitter=0.1, seed=4)
    st = build_neighbor_stencils(mesh)
    dp = build_space(mesh, "dp", 1)
    f0 = interpolate(dp, lambda x, y: 2.0 * x + y)
    f1 = interpolate(dp, lambda x, y: 2.0 * (x - 0.01) + y)
    pts = sample_lattice(3)
    mn0, mx0 = elem_sample_minmax(f0, pts)
    mn1, mx1 = elem_sample_minmax(f1, pts)
    flags = dmp_detect(mn0, mx0, mn1, mx1, st, DmpParams())
    # inflow-boundary cells have no upstream data in their stencil and may
    # flag; every interior cell must stay quiet
    bverts = set(mesh.vcanon[mesh.fverts[mesh.boundary_facets].ravel()])
    interior = np.array([not set(mesh.vcanon[mesh.tris[e]]) & bverts
                         for e in range(mesh.n_tris)])
    assert not flags[interior].any()


def test_constructed_overshoot_flags_exact_elements(setup):
    mesh, st = setup
    n = mesh.n_tris
    w_old = np.where(np.arange(n) < n // 2, 0.0, 1.0)
    w_new = w_old.copy()
    bad = [3, 17]
    smin, smax = stencil_bounds(w_old, w_old, st)
    delta = np.maximum(1e-4, 1e-3 * (smax - smin))
    for b in bad:
        w_new[b] = smax[b] + delta[b] + 2e-4  # exceed by ~2*delta0
    flags = dmp_detect(w_old, w_old, w_new, w_new, st, DmpParams())
    assert set(np.nonzero(flags)[0]) == set(bad)


def test_delta_floor_and_shift_invariance(setup):
    mesh, st = setup
    rng = np.random.default_rng(0)
    w = rng.standard_normal(mesh.n_tris)
    smin, smax = stencil_bounds(w, w, st)
    delta = np.maximum(1e-4, 1e-3 * (smax - smin))
    assert (delta >= 1e-4).all()
    # adding a constant leaves both delta and the flags unchanged
    flags1 = dmp_detect(w, w, w + 5e-5, w + 5e-5, st, DmpParams())
    flags2 = dmp_detect(w + 7.0, w + 7.0, w + 7.0 + 5e-5, w + 7.0 + 5e-5, st, DmpParams())
    assert np.array_equal(flags1, flags2)


def test_flagging_relabel_invariant(setup):
    mesh, st = setup
    rng = np.random.default_rng(1)
    w_old = rng.standard_normal(mesh.n_tris)
    w_new = w_old + rng.standard_normal(mesh.n_tris) * 2e-4
    flags = dmp_detect(w_old, w_old, w_new, w_new, st, DmpParams())
    perm = rng.permutation(mesh.n_tris)
    inv = np.argsort(perm)
    st_p = [np.sort(inv[st[perm[e]]]) for e in range(mesh.n_tris)]
    flags_p = dmp_detect(w_old[perm], w_old[perm], w_new[perm], w_new[perm], st_p, DmpParams())
    assert np.array_equal(flags_p, flags[perm])


def test_viscosity_two_valued(setup):
    mesh, _ = setup
    flags = np.zeros(mesh.n_tris, dtype=bool)
    flags[[2, 5]] = True
    ws = np.full(mesh.n_tris, 2.0)
    eps = viscosity_from_flags(flags, mesh.diameters, ws, 1e-10)
    assert set(np.round(eps[~flags], 14)) == {1e-10}
    assert np.allclose(eps[flags], 0.5 * mesh.diameters[flags] * 2.0)
    # unit-diameter element with wavespeed 2 -> eps = 1
    assert abs(viscosity_from_flags(np.array([True]), np.array([1.0]),
                                    np.array([2.0]), 1e-10)[0] - 1.0) < 1e-15
    assert viscosity_from_flags(np.zeros(3, bool), np.ones(3), np.ones(3), 1e-10).max() == 1e-10


def test_mood_cycle_accepts_smooth():
    calls = []

    def step(eps):
        calls.append(eps)
        return "candidate" if eps is None else "recomputed"

    res, flags, recomputed = mood_cycle(step, lambda c: np.zeros(4, bool),
                                        lambda f: np.ones(4))
    assert res == "candidate" and not recomputed and calls == [None]


def test_mood_cycle_recomputes_once():
    calls = []

    def step(eps):
        calls.append(eps)
        return "candidate" if eps is None else "recomputed"

    res, flags, recomputed = mood_cycle(step, lambda c: np.array([True, False]),
                                        lambda f: f.astype(float))
    assert res == "recomputed" and recomputed and len(calls) == 2


def test_limiter_quiet_on_smooth_taylor_green():
    """Smooth low-Mach data never trips the detector over several steps."""
    mesh = generate_rect_mesh(12, 12, (0, 0, 2 * np.pi, 2 * np.pi), jitter=0.1, seed=1012,
                              periodic_x=True, periodic_y=True, diagonal="alternate")
    sim = Simulation(mesh, SimulationConfig(degree=1))
    st = make_state(sim, lambda x, y: 1.0 + 0 * x,
                    lambda x, y: np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)], -1),
                    p_fn=lambda x, y: 1e7 + 0.25 * (np.cos(2 * x) + np.cos(2 * y)))
    for _ in range(5):
        st, rep = sim.advance(st)
        assert rep.flagged_rho == 0 and rep.flagged_s == 0
