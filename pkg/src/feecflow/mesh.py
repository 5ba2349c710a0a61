"""Unstructured 2D triangle meshes with facet topology and periodic identification.

A facet record keeps both adjacent elements (or one, on the boundary), the
local edge index and a parametrization flip per side, a unit normal pointing
from the first adjacent element to the second, and, for periodically
identified facets, the translation carrying side 1's geometry onto side 2's.
Periodic facets are merged into single interior facets, so DG facet loops and
conforming DOF numbering never special-case periodicity.

The facet parametrization convention: the global facet direction is side 1's
local edge direction, hence ``flip`` is always False on side 1 and True on
side 2 (verified geometrically for periodic pairs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    pass


@dataclass
class Mesh:
    verts: np.ndarray  # (nv, 2)
    tris: np.ndarray  # (nt, 3) CCW vertex indices
    # facet arrays, all length nf
    fverts: np.ndarray  # (nf, 2) side-1 vertex pair, in global facet direction
    f2e: np.ndarray  # (nf, 2) adjacent elements, -1 for missing second
    f2loc: np.ndarray  # (nf, 2) local edge index per side
    f2flip: np.ndarray  # (nf, 2) bool, local edge direction vs global direction
    fnormal: np.ndarray  # (nf, 2) unit normal out of first element
    flen: np.ndarray  # (nf,)
    ftrans: np.ndarray  # (nf, 2) translation side1 -> side2 (periodic), else 0
    btag: np.ndarray  # (nf,) tag index into tag_names, -1 for interior
    tag_names: list[str]
    vcanon: np.ndarray  # (nv,) canonical vertex id under periodic identification
    # element geometry
    jac: np.ndarray = field(init=False)  # (nt, 2, 2)
    jac_inv: np.ndarray = field(init=False)
    det_jac: np.ndarray = field(init=False)  # (nt,)
    areas: np.ndarray = field(init=False)
    diameters: np.ndarray = field(init=False)
    centroids: np.ndarray = field(init=False)
    elem_facets: np.ndarray = field(init=False)  # (nt, 3) facet id of local edge k

    def __post_init__(self):
        v0 = self.verts[self.tris[:, 0]]
        v1 = self.verts[self.tris[:, 1]]
        v2 = self.verts[self.tris[:, 2]]
        self.jac = np.stack([v1 - v0, v2 - v0], axis=2)  # columns are edge vectors
        self.det_jac = self.jac[:, 0, 0] * self.jac[:, 1, 1] - self.jac[:, 0, 1] * self.jac[:, 1, 0]
        if np.any(self.det_jac <= 0):
            bad = int(np.argmax(self.det_jac <= 0))
            raise MeshError(f"triangle {bad} has non-positive area")
        inv = np.empty_like(self.jac)
        inv[:, 0, 0] = self.jac[:, 1, 1]
        inv[:, 0, 1] = -self.jac[:, 0, 1]
        inv[:, 1, 0] = -self.jac[:, 1, 0]
        inv[:, 1, 1] = self.jac[:, 0, 0]
        self.jac_inv = inv / self.det_jac[:, None, None]
        self.areas = 0.5 * self.det_jac
        e0 = np.linalg.norm(v2 - v1, axis=1)
        e1 = np.linalg.norm(v0 - v2, axis=1)
        e2 = np.linalg.norm(v1 - v0, axis=1)
        self.diameters = np.maximum(np.maximum(e0, e1), e2)
        self.centroids = (v0 + v1 + v2) / 3.0
        ef = np.full((self.n_tris, 3), -1, dtype=np.int64)
        for f in range(self.n_facets):
            for side in range(2):
                e = self.f2e[f, side]
                if e >= 0:
                    ef[e, self.f2loc[f, side]] = f
        if np.any(ef < 0):
            raise MeshError("incomplete facet connectivity")
        self.elem_facets = ef

    @property
    def n_verts(self) -> int:
        return self.verts.shape[0]

    @property
    def n_tris(self) -> int:
        return self.tris.shape[0]

    @property
    def n_facets(self) -> int:
        return self.fverts.shape[0]

    @property
    def interior_mask(self) -> np.ndarray:
        return self.f2e[:, 1] >= 0

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.nonzero(self.f2e[:, 1] < 0)[0]

    def facets_with_tag(self, name: str) -> np.ndarray:
        if name not in self.tag_names:
            raise MeshError(f"unknown boundary tag {name!r}; known: {self.tag_names}")
        return np.nonzero(self.btag == self.tag_names.index(name))[0]

    def euler_characteristic(self) -> int:
        """V - E + T with periodic-identified vertex and facet counts."""
        nv = len(np.unique(self.vcanon))
        return nv - self.n_facets + self.n_tris

    def total_area(self) -> float:
        return float(self.areas.sum())


def _build_facets(verts, tris, periodic_pairs, boundary_tag_fn, tag_names):
    """Construct facet arrays; periodic_pairs maps boundary-edge matching."""
    nt = tris.shape[0]
    edge_of = {}  # (min v, max v) -> list of (elem, local k)
    for e in range(nt):
        for k in range(3):
            va, vb = tris[e, (k + 1) % 3], tris[e, (k + 2) % 3]
            edge_of.setdefault((min(va, vb), max(va, vb)), []).append((e, k))

    entries = []  # one per geometric facet before periodic merge
    for key in sorted(edge_of):
        sides = sorted(edge_of[key])
        if len(sides) > 2:
            raise MeshError(f"edge {key} shared by more than two triangles")
        entries.append(sides)

    def side_dir(e, k):
        va, vb = tris[e, (k + 1) % 3], tris[e, (k + 2) % 3]
        return va, vb

    # periodic merge: match boundary entries pairwise
    merged = [None] * len(entries)
    facet_of_edgekey = {}
    for i, sides in enumerate(entries):
        e, k = sides[0]
        va, vb = side_dir(e, k)
        facet_of_edgekey[(min(va, vb), max(va, vb))] = i

    uf_parent = np.arange(verts.shape[0], dtype=np.int64)

    def uf_find(a):
        while uf_parent[a] != a:
            uf_parent[a] = uf_parent[uf_parent[a]]
            a = uf_parent[a]
        return a

    def uf_union(a, b):
        ra, rb = uf_find(a), uf_find(b)
        if ra != rb:
            if ra > rb:
                ra, rb = rb, ra
            uf_parent[rb] = ra

    pairs = []  # (facet index 1, facet index 2, translation, vertex map)
    used = set()
    for (key1, key2, trans) in periodic_pairs:
        i1 = facet_of_edgekey[key1]
        i2 = facet_of_edgekey[key2]
        if i1 in used or i2 in used:
            raise MeshError("facet appears in multiple periodic pairs")
        used.update((i1, i2))
        l1 = np.linalg.norm(verts[key1[0]] - verts[key1[1]])
        l2 = np.linalg.norm(verts[key2[0]] - verts[key2[1]])
        if abs(l1 - l2) > 1e-12 * max(l1, l2):
            raise MeshError("periodic facets have mismatched lengths")
        pairs.append((i1, i2, np.asarray(trans, dtype=float)))
        # vertex identification by translated coordinates
        for va in key1:
            img = verts[va] + trans
            d = [np.linalg.norm(img - verts[vx]) for vx in key2]
            vb = key2[int(np.argmin(d))]
            if min(d) > 1e-9 * max(l1, 1.0):
                raise MeshError("periodic facet vertices do not match under translation")
            uf_union(va, vb)

    drop = set()
    for i1, i2, trans in pairs:
        if len(entries[i1]) != 1 or len(entries[i2]) != 1:
            raise MeshError("periodic identification of a non-boundary facet")
        entries[i1] = [entries[i1][0], entries[i2][0]]
        merged[i1] = trans
        drop.add(i2)

    keep = [i for i in range(len(entries)) if i not in drop]
    nf = len(keep)
    fverts = np.zeros((nf, 2), dtype=np.int64)
    f2e = np.full((nf, 2), -1, dtype=np.int64)
    f2loc = np.zeros((nf, 2), dtype=np.int8)
    f2flip = np.zeros((nf, 2), dtype=bool)
    fnormal = np.zeros((nf, 2))
    flen = np.zeros(nf)
    ftrans = np.zeros((nf, 2))
    btag = np.full(nf, -1, dtype=np.int32)

    for f, i in enumerate(keep):
        sides = entries[i]
        e1, k1 = sides[0]
        va, vb = side_dir(e1, k1)
        fverts[f] = (va, vb)
        f2e[f, 0], f2loc[f, 0] = e1, k1
        tvec = verts[vb] - verts[va]
        ln = np.linalg.norm(tvec)
        flen[f] = ln
        fnormal[f] = (tvec[1] / ln, -tvec[0] / ln)
        if len(sides) == 2:
            e2, k2 = sides[1]
            f2e[f, 1], f2loc[f, 1] = e2, k2
            va2, vb2 = side_dir(e2, k2)
            trans = merged[i] if merged[i] is not None else np.zeros(2)
            ftrans[f] = trans
            # side-2 local direction against the image of the global direction
            same = np.linalg.norm(verts[va] + trans - verts[va2]) <= 1e-9 * max(ln, 1.0)
            f2flip[f, 1] = not same
            if not f2flip[f, 1] and np.linalg.norm(verts[vb] + trans - verts[vb2]) > 1e-9 * max(ln, 1.0):
                raise MeshError("inconsistent periodic facet orientation")
        else:
            btag[f] = boundary_tag_fn(verts[va], verts[vb])

    vcanon = np.array([uf_find(v) for v in range(verts.shape[0])], dtype=np.int64)
    return fverts, f2e, f2loc, f2flip, fnormal, flen, ftrans, btag, vcanon


def generate_rect_mesh(
    nx: int,
    ny: int,
    domain=(0.0, 0.0, 1.0, 1.0),
    jitter: float = 0.0,
    periodic_x: bool = False,
    periodic_y: bool = False,
    seed: int = 0,
    diagonal: str = "same",
) -> Mesh:
    """Diagonal-split rectangle mesh with optional seeded interior jitter.

    Produces 2*nx*ny CCW triangles.  Jitter displaces strictly interior
    vertices by a uniform perturbation up to ``jitter`` times the local grid
    spacing, deterministically from ``seed``; boundary vertices stay put so
    periodic identification remains exact.  ``diagonal`` picks the quad split:
    ``"same"`` biases every quad the same way, ``"alternate"`` flips the
    diagonal checkerboard-fashion, which removes the directional bias and is
    what the benchmark mesh families use.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    if not 0.0 <= jitter <= 0.3:
        raise ValueError("jitter must lie in [0, 0.3]")
    x0, y0, x1, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate rectangle")
    dx, dy = (x1 - x0) / nx, (y1 - y0) / ny

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")  # shape (ny+1, nx+1)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    if jitter > 0:
        rng = np.random.default_rng(seed)
        disp = rng.uniform(-jitter, jitter, size=(ny + 1, nx + 1, 2))
        disp[:, :, 0] *= dx
        disp[:, :, 1] *= dy
        interior = np.zeros((ny + 1, nx + 1), dtype=bool)
        interior[1:-1, 1:-1] = True
        verts += np.where(interior.ravel()[:, None], disp.reshape(-1, 2), 0.0)

    def idx(i, j):
        return j * (nx + 1) + i

    if diagonal not in ("same", "alternate"):
        raise ValueError("diagonal must be 'same' or 'alternate'")
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    t = 0
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if diagonal == "alternate" and (i + j) % 2 == 1:
                tris[t] = (a, b, d)
                tris[t + 1] = (b, c, d)
            else:
                tris[t] = (a, b, c)
                tris[t + 1] = (a, c, d)
            t += 2

    tag_names = ["left", "right", "bottom", "top"]
    tol = 1e-12 * max(x1 - x0, y1 - y0)

    def tag_fn(pa, pb):
        mx, my = 0.5 * (pa + pb)
        if abs(mx - x0) < tol:
            return 0
        if abs(mx - x1) < tol:
            return 1
        if abs(my - y0) < tol:
            return 2
        if abs(my - y1) < tol:
            return 3
        raise MeshError("boundary facet not on the rectangle boundary")

    periodic_pairs = []
    if periodic_x:
        for j in range(ny):
            k1 = tuple(sorted((idx(0, j), idx(0, j + 1))))
            k2 = tuple(sorted((idx(nx, j), idx(nx, j + 1))))
            periodic_pairs.append((k1, k2, (x1 - x0, 0.0)))
    if periodic_y:
        for i in range(nx):
            k1 = tuple(sorted((idx(i, 0), idx(i + 1, 0))))
            k2 = tuple(sorted((idx(i, ny), idx(i + 1, ny))))
            periodic_pairs.append((k1, k2, (0.0, y1 - y0)))

    arrays = _build_facets(verts, tris, periodic_pairs, tag_fn, tag_names)
    return Mesh(verts, tris, *arrays[:-1], tag_names=tag_names, vcanon=arrays[-1])


def build_neighbor_stencils(mesh: Mesh, edge_only: bool = False) -> list[np.ndarray]:
    """Per-element MOOD stencils: elements sharing a vertex (or only an edge).

    Periodic identification counts as sharing.  Every stencil contains the
    element itself; the vertex-sharing relation is symmetric by construction.
    """
    if edge_only:
        stencils = [[e] for e in range(mesh.n_tris)]
        for f in range(mesh.n_facets):
            e1, e2 = mesh.f2e[f]
            if e2 >= 0:
                stencils[e1].append(e2)
                stencils[e2].append(e1)
        return [np.unique(np.array(s, dtype=np.int64)) for s in stencils]
    canon_tris = mesh.vcanon[mesh.tris]
    v2e: dict[int, list[int]] = {}
    for e in range(mesh.n_tris):
        for v in canon_tris[e]:
            v2e.setdefault(int(v), []).append(e)
    stencils = []
    for e in range(mesh.n_tris):
        acc = []
        for v in canon_tris[e]:
            acc.extend(v2e[int(v)])
        stencils.append(np.unique(np.array(acc, dtype=np.int64)))
    return stencils


def import_gmsh_ascii(path: str) -> tuple[Mesh, int]:
    """Read a Gmsh MSH 2.2 ASCII file (triangles + physical-line tags).

    Returns the mesh and the number of skipped unsupported elements.
    Boundary facets whose endpoints appear in a tagged physical line get that
    tag; untagged boundary facets are tagged "untagged".
    """
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]

    def find_section(name):
        try:
            start = lines.index(f"${name}")
        except ValueError:
            raise MeshError(f"missing ${name} section") from None
        try:
            end = lines.index(f"$End{name}", start)
        except ValueError:
            raise MeshError(f"unterminated ${name} section (line {start + 1})") from None
        return start, end

    phys_names = {}
    if "$PhysicalNames" in lines:
        s, e = find_section("PhysicalNames")
        for ln in lines[s + 2 : e]:
            parts = ln.split()
            phys_names[int(parts[1])] = parts[2].strip('"')

    s, e = find_section("Nodes")
    n_nodes = int(lines[s + 1])
    id_map = {}
    verts = np.zeros((n_nodes, 2))
    for row, ln in enumerate(lines[s + 2 : s + 2 + n_nodes]):
        parts = ln.split()
        if len(parts) < 4:
            raise MeshError(f"malformed node record at line {s + 3 + row}")
        id_map[int(parts[0])] = row
        verts[row] = (float(parts[1]), float(parts[2]))

    s, e = find_section("Elements")
    n_elems = int(lines[s + 1])
    tris = []
    tagged_edges = {}
    skipped = 0
    for row, ln in enumerate(lines[s + 2 : s + 2 + n_elems]):
        parts = [int(p) for p in ln.split()]
        if len(parts) < 3:
            raise MeshError(f"malformed element record at line {s + 3 + row}")
        etype, ntags = parts[1], parts[2]
        tags = parts[3 : 3 + ntags]
        conn = parts[3 + ntags :]
        if etype == 2:
            a, b, c = (id_map[v] for v in conn)
            p = verts[[a, b, c]]
            d1, d2 = p[1] - p[0], p[2] - p[0]
            if d1[0] * d2[1] - d1[1] * d2[0] < 0:
                b, c = c, b
            tris.append((a, b, c))
        elif etype == 1:
            a, b = (id_map[v] for v in conn)
            tag = tags[0] if tags else 0
            tagged_edges[(min(a, b), max(a, b))] = tag
        else:
            skipped += 1
    if not tris:
        raise MeshError("no triangles in mesh file")
    tris = np.array(tris, dtype=np.int64)

    tag_ids = sorted(set(tagged_edges.values()))
    tag_names = [phys_names.get(t, f"tag{t}") for t in tag_ids] + ["untagged"]

    def tag_fn(pa, pb):
        return -2  # placeholder; resolved below by vertex pair

    arrays = _build_facets(verts, tris, [], tag_fn, tag_names)
    mesh = Mesh(verts, tris, *arrays[:-1], tag_names=tag_names, vcanon=arrays[-1])
    for f in mesh.boundary_facets:
        key = tuple(sorted(mesh.fverts[f]))
        if key in tagged_edges:
            mesh.btag[f] = tag_ids.index(tagged_edges[key])
        else:
            mesh.btag[f] = len(tag_ids)
    return mesh, skipped


def export_gmsh_ascii(mesh: Mesh, path: str) -> None:
    """Write the mesh in Gmsh MSH 2.2 ASCII (triangles + tagged boundary lines)."""
    with open(path, "w") as fh:
        fh.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        fh.write(f"$Nodes\n{mesh.n_verts}\n")
        for i, (x, y) in enumerate(mesh.verts, start=1):
            fh.write(f"{i} {float(x)!r} {float(y)!r} 0\n")
        fh.write("$EndNodes\n")
        bnd = mesh.boundary_facets
        fh.write(f"$Elements\n{mesh.n_tris + len(bnd)}\n")
        eid = 1
        for f in bnd:
            a, b = mesh.fverts[f] + 1
            fh.write(f"{eid} 1 2 {mesh.btag[f] + 1} 0 {a} {b}\n")
            eid += 1
        for t in range(mesh.n_tris):
            a, b, c = mesh.tris[t] + 1
            fh.write(f"{eid} 2 2 0 0 {a} {b} {c}\n")
            eid += 1
        fh.write("$EndElements\n")


def dump_csv(mesh: Mesh, verts_path: str, tris_path: str) -> None:
    """Plain-text dump of vertices and triangles for debugging."""
    np.savetxt(verts_path, mesh.verts, delimiter=",", header="x,y", comments="")
    np.savetxt(tris_path, mesh.tris, delimiter=",", fmt="%d", header="v0,v1,v2", comments="")
