"""Output writers: legacy ASCII VTK snapshots and diagnostics CSV."""

from __future__ import annotations

import numpy as np

from . import basis
from .mesh import Mesh
from .spaces import eval_rt, eval_scalar
from .stepper import Simulation, State
from .transport import vals_tab_rt


def _cell_means(sim: Simulation, f) -> np.ndarray:
    rule, (dpv, _) = sim.dp.volume_tab()
    vals = eval_scalar(f, dpv)
    return (rule.weights[None, :] * vals).sum(axis=1) / 0.5


def write_vtk(path: str, sim: Simulation, state: State, cell_fields: dict | None = None) -> None:
    """Legacy ASCII UNSTRUCTURED_GRID snapshot.

    Cell data: means of rho, p, S, divergence, plus any extra per-element
    arrays (viscosities, troubled mask) and the cell-mean velocity vector.
    Point data: vertex-averaged velocity, since RT fields are not nodal.
    """
    mesh = sim.mesh
    rule, (dpv, _) = sim.dp.volume_tab()
    rho_q = eval_scalar(state.rho, dpv)
    m_q = eval_rt(state.m, vals_tab_rt(sim.rt, rule))
    u_q = m_q / rho_q[..., None]
    wmean = rule.weights / 0.5
    u_cell = (wmean[None, :, None] * u_q).sum(axis=1)

    # vertex-averaged velocity from corner samples of every adjacent element
    corners = basis.REF_VERTS
    uc = eval_rt(state.m, basis.rt_tab(sim.r, corners)[0])
    rc = eval_scalar(state.rho, basis.dp_tab(sim.r, corners)[0])
    u_corner = uc / rc[..., None]
    u_vert = np.zeros((mesh.n_verts, 2))
    count = np.zeros(mesh.n_verts)
    np.add.at(u_vert, mesh.tris.ravel(), u_corner.reshape(-1, 2))
    np.add.at(count, mesh.tris.ravel(), 1.0)
    u_vert /= np.maximum(count, 1.0)[:, None]

    fields = {
        "rho": _cell_means(sim, state.rho),
        "p": _cell_means(sim, state.p),
        "S": _cell_means(sim, state.s),
    }
    if cell_fields:
        fields.update(cell_fields)

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfeecflow snapshot t=%r\nASCII\n" % state.t)
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_verts} double\n")
        for x, y in mesh.verts:
            fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        fh.write(f"CELLS {mesh.n_tris} {4 * mesh.n_tris}\n")
        for a, b, c in mesh.tris:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {mesh.n_tris}\n")
        fh.write("5\n" * mesh.n_tris)
        fh.write(f"CELL_DATA {mesh.n_tris}\n")
        for name, arr in fields.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(repr(float(v)) for v in arr) + "\n")
        fh.write("VECTORS velocity_cell double\n")
        for vx, vy in u_cell:
            fh.write(f"{float(vx)!r} {float(vy)!r} 0.0\n")
        fh.write(f"POINT_DATA {mesh.n_verts}\n")
        fh.write("VECTORS velocity double\n")
        for vx, vy in u_vert:
            fh.write(f"{float(vx)!r} {float(vy)!r} 0.0\n")


DIAG_COLUMNS = ("t", "energy", "momentum_x", "momentum_y", "mass", "div_l2", "div_linf",
                "mach", "newton_iters", "dt", "flagged_s", "flagged_rho")


class DiagnosticsLog:
    """Accumulates one row per snapshot and writes a stable CSV."""

    def __init__(self):
        self.rows = []

    def append(self, diag: dict, newton_iters: int = 0, dt: float = 0.0,
               flagged_s: int = 0, flagged_rho: int = 0):
        row = dict(diag)
        row.update(newton_iters=newton_iters, dt=dt, flagged_s=flagged_s,
                   flagged_rho=flagged_rho)
        self.rows.append(row)

    def write(self, path: str, header_lines=()) -> None:
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(",".join(DIAG_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(repr(float(row.get(c, 0))) for c in DIAG_COLUMNS) + "\n")
