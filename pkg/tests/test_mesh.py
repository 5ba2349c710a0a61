import numpy as np
import pytest

from feecflow.mesh import (MeshError, build_neighbor_stencils, dump_csv, export_gmsh_ascii,
                           generate_rect_mesh, import_gmsh_ascii)


def test_structured_counts():
    m = generate_rect_mesh(2, 2)
    assert m.n_tris == 8
    assert m.n_verts == 9
    assert m.n_facets == 16
    assert len(m.boundary_facets) == 8
    assert m.euler_characteristic() == 1  # disk


def test_fully_periodic_unit():
    m = generate_rect_mesh(1, 1, periodic_x=True, periodic_y=True)
    assert m.n_tris == 2
    assert m.interior_mask.all()
    assert m.n_facets == 3
    assert m.euler_characteristic() == 0  # torus


def test_jittered_area():
    m = generate_rect_mesh(40, 40, (0, 0, 10, 10), jitter=0.2, periodic_x=True,
                           periodic_y=True, seed=7)
    assert abs(m.total_area() - 100.0) < 1e-12 * 100.0
    assert np.all(m.areas > 0)


def test_degenerate_rectangle_rejected():
    with pytest.raises(ValueError):
        generate_rect_mesh(2, 2, (0, 0, 0, 1))
    with pytest.raises(ValueError):
        generate_rect_mesh(0, 2)
    with pytest.raises(ValueError):
        generate_rect_mesh(2, 2, jitter=0.5)


def test_normal_convention():
    """Normal points from the first adjacent element towards the second."""
    m = generate_rect_mesh(5, 4, (0, 0, 2, 1), jitter=0.15, seed=3,
                           periodic_x=True, periodic_y=True)
    for f in range(m.n_facets):
        e1, e2 = m.f2e[f]
        if e2 >= 0:
            ghost_c2 = m.centroids[e2] - m.ftrans[f]
            assert m.fnormal[f] @ (ghost_c2 - m.centroids[e1]) > 0


def test_facet_orientation_bookkeeping():
    m = generate_rect_mesh(4, 4, jitter=0.1, seed=1)
    for f in range(m.n_facets):
        for side in range(2):
            e = m.f2e[f, side]
            if e < 0:
                continue
            assert m.elem_facets[e, m.f2loc[f, side]] == f


def test_translation_invariance():
    a = generate_rect_mesh(3, 3, (0, 0, 1, 1))
    b = generate_rect_mesh(3, 3, (2, 5, 3, 6))
    assert np.allclose(a.verts + [2, 5], b.verts)
    assert np.array_equal(a.tris, b.tris)


def test_periodic_facet_lengths():
    m = generate_rect_mesh(6, 6, jitter=0.2, seed=9, periodic_x=True)
    for f in range(m.n_facets):
        if np.any(m.ftrans[f] != 0):
            e2 = m.f2e[f, 1]
            k2 = m.f2loc[f, 1]
            vs = m.tris[e2, [(k2 + 1) % 3, (k2 + 2) % 3]]
            l2 = np.linalg.norm(m.verts[vs[0]] - m.verts[vs[1]])
            assert abs(l2 - m.flen[f]) < 1e-12 * m.flen[f]


def test_interior_stencil_thirteen():
    """Same-diagonal split: interior element stencil is 12 vertex neighbors + itself."""
    m = generate_rect_mesh(4, 4)
    st = build_neighbor_stencils(m)

    def idx(i, j):
        return j * 5 + i

    target = {idx(1, 1), idx(2, 1), idx(2, 2)}
    e = next(t for t in range(m.n_tris) if set(m.tris[t]) == target)
    assert len(st[e]) == 13
    corner = next(t for t in range(m.n_tris) if idx(0, 0) in m.tris[t])
    assert len(st[corner]) < 13


def test_stencils_symmetric_and_reflexive():
    m = generate_rect_mesh(4, 3, jitter=0.1, seed=2, periodic_x=True)
    st = build_neighbor_stencils(m)
    for t in range(m.n_tris):
        assert t in st[t]
        for o in st[t]:
            assert t in st[o]


def test_tiny_periodic_stencil():
    m = generate_rect_mesh(1, 1, periodic_x=True, periodic_y=True)
    st = build_neighbor_stencils(m)
    assert all(set(s) == {0, 1} for s in st)


def test_edge_only_stencils():
    m = generate_rect_mesh(3, 3)
    st = build_neighbor_stencils(m, edge_only=True)
    for t in range(m.n_tris):
        assert t in st[t]
        assert len(st[t]) <= 4


def test_gmsh_roundtrip(tmp_path):
    m = generate_rect_mesh(4, 4, jitter=0.1, seed=5)
    path = tmp_path / "mesh.msh"
    export_gmsh_ascii(m, str(path))
    m2, skipped = import_gmsh_ascii(str(path))
    assert skipped == 0
    assert m2.n_tris == m.n_tris
    assert m2.n_facets == m.n_facets
    assert abs(m2.total_area() - m.total_area()) < 1e-14
    assert len(m2.boundary_facets) == len(m.boundary_facets)


def test_gmsh_minimal_two_triangles(tmp_path):
    path = tmp_path / "two.msh"
    path.write_text("""$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
3
1 2 2 0 0 1 2 3
2 2 2 0 0 1 3 4
3 15 2 0 0 1
$EndElements
""")
    m, skipped = import_gmsh_ascii(str(path))
    assert m.n_tris == 2
    assert skipped == 1  # the point element


def test_gmsh_no_triangles(tmp_path):
    path = tmp_path / "quads.msh"
    path.write_text("""$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
1
1 3 2 0 0 1 2 3 4
$EndElements
""")
    with pytest.raises(MeshError, match="no triangles"):
        import_gmsh_ascii(str(path))


def test_gmsh_malformed_section(tmp_path):
    path = tmp_path / "bad.msh"
    path.write_text("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n1\n1 0 0 0\n")
    with pytest.raises(MeshError):
        import_gmsh_ascii(str(path))


def test_csv_dump(tmp_path):
    m = generate_rect_mesh(2, 2)
    dump_csv(m, str(tmp_path / "v.csv"), str(tmp_path / "t.csv"))
    verts = np.loadtxt(tmp_path / "v.csv", delimiter=",", skiprows=1)
    tris = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1, dtype=int)
    assert verts.shape == (9, 2)
    assert tris.shape == (8, 3)


def test_alternating_diagonal_counts():
    m = generate_rect_mesh(4, 4, diagonal="alternate")
    assert m.n_tris == 32
    assert m.euler_characteristic() == 1
    assert abs(m.total_area() - 1.0) < 1e-14
