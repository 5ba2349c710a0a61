"""Command-line front end: solve benchmark cases and reproduce the result tables.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .cases import CASE_NAMES, builtin_case, run_convergence, run_mach_sweep, run_to_time
from .io_vtk import DiagnosticsLog, write_vtk
from .mesh import import_gmsh_ascii
from .sparsela import NotSpdError
from .stepper import StepFailure
from .transport import PositivityError
from . import __version__


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    case: str = "taylor_green"
    n: int | None = None
    degree: int | None = None
    cfl: float | None = None
    tend: float | None = None
    p0: float = 1e7
    mu: float = 0.01
    limiter: bool = True
    out: str = "out"
    threads: int = 1
    seed: int | None = None
    snapshots: int = 0
    max_steps: int = 10**6

    def provenance(self) -> list[str]:
        items = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return [f"feecflow {__version__}"] + items


_CFG_TYPES = {f.name: f for f in fields(RunConfig)}


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Flat key=value config with sections; unknown keys are rejected."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, val in parser.items(section):
                if key not in _CFG_TYPES:
                    raise ConfigError(f"unknown config key {key!r} in section [{section}]")
                cfg = replace(cfg, **{key: _coerce(key, val)})
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _CFG_TYPES:
            raise ConfigError(f"unknown option {key!r}")
        cfg = replace(cfg, **{key: val})
    if cfg.case not in CASE_NAMES:
        raise ConfigError(f"unknown case {cfg.case!r}; known: {', '.join(CASE_NAMES)}")
    return cfg


def _coerce(key: str, val: str):
    f = _CFG_TYPES[key]
    if f.type in ("bool", bool) or key == "limiter":
        if val.lower() in ("on", "true", "1", "yes"):
            return True
        if val.lower() in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {val!r}")
    if key in ("case", "out"):
        return val
    if key in ("n", "degree", "threads", "seed", "snapshots", "max_steps"):
        return int(val)
    return float(val)


def cmd_solve(args) -> int:
    over = dict(case=args.case, n=args.n, degree=args.degree, cfl=args.cfl, tend=args.tend,
                p0=args.p0, mu=args.mu, out=args.out, threads=args.threads, seed=args.seed,
                snapshots=args.snapshots)
    if args.limiter is not None:
        over["limiter"] = args.limiter == "on"
    cfg = parse_config(args.config, over)

    case = builtin_case(cfg.case, p0=cfg.p0, mu=cfg.mu)
    if cfg.degree is not None:
        case = replace(case, degree=cfg.degree)
    if cfg.cfl is not None:
        case = replace(case, cfl=cfg.cfl)
    if cfg.tend is not None:
        case = replace(case, t_end=cfg.tend)
    n = cfg.n or case.n

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = case.mesh(n, seed=cfg.seed if cfg.seed is not None else 1000 + n)
    from .stepper import Simulation, SimulationConfig, make_state

    simcfg = SimulationConfig(degree=case.degree, gas=case.gas, cfl=case.cfl,
                              mode=case.mode, mu=case.mu, fixed_dt=case.fixed_dt,
                              limiter=cfg.limiter)
    sim = Simulation(mesh, simcfg, case.bc)
    state = make_state(sim, case.rho0, case.u0, p_fn=case.p0)

    log = DiagnosticsLog()
    log.append(sim.diagnostics(state))
    snap_every = None
    if cfg.snapshots > 0:
        snap_every = case.t_end / cfg.snapshots
    next_snap = snap_every
    counter = [0]

    def callback(st, rep):
        nonlocal next_snap
        counter[0] += 1
        log.append(sim.diagnostics(st), rep.newton_iters, rep.dt, rep.flagged_s, rep.flagged_rho)
        if snap_every is not None and st.t >= next_snap - 1e-12:
            write_vtk(str(out / f"{cfg.case}_{counter[0]:06d}.vtk"), sim, st)
            next_snap += snap_every

    state, nsteps = run_to_time(sim, state, case.t_end, callback, max_steps=cfg.max_steps)
    write_vtk(str(out / f"{cfg.case}_final.vtk"), sim, state)
    log.write(str(out / "diagnostics.csv"), header_lines=cfg.provenance())
    (out / "provenance.txt").write_text("\n".join(cfg.provenance()) + "\n")
    d = sim.diagnostics(state)
    print(f"{cfg.case}: t={state.t:.6g} steps={nsteps} mass={d['mass']:.12g} "
          f"energy={d['energy']:.12g} div_inf={d['div_linf']:.3e}")
    return 0


TABLE_IDS = ("shu_r0", "shu_r1", "shu_r2", "tgv_r0", "tgv_r1", "tgv_r2", "mach_sweep")


def cmd_reproduce(args) -> int:
    if args.table not in TABLE_IDS:
        raise ConfigError(f"unknown table id {args.table!r}; known: {', '.join(TABLE_IDS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.table == "mach_sweep":
        rows, sd, sr = run_mach_sweep(verbose=True)
        with open(out / "mach_sweep.csv", "w") as fh:
            fh.write("p0,Mach,linf_div_u,linf_rho_err\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")
            fh.write(f"# fitted order div={sd!r} rho={sr!r}\n")
        print(f"mach_sweep: fitted orders div={sd:.2f} rho={sr:.2f}")
        return 0
    ns = [20 * 2**k for k in range(args.meshes)]
    if len(ns) < 3:
        raise ConfigError("convergence tables need at least 3 meshes (--meshes >= 3)")
    r = int(args.table[-1])
    if args.table.startswith("shu"):
        case = builtin_case("shu_vortex", degree=r)
    else:
        case = builtin_case("taylor_green", p0=1e7, degree=r, t_end=0.5, cfl=0.5)
    table = run_convergence(case, ns, verbose=True)
    table.to_csv(str(out / f"{args.table}.csv"))
    text = table.format()
    (out / f"{args.table}.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_mesh_info(args) -> int:
    mesh, skipped = import_gmsh_ascii(args.file)
    print(f"vertices: {mesh.n_verts}")
    print(f"triangles: {mesh.n_tris}")
    print(f"facets: {mesh.n_facets} (boundary {len(mesh.boundary_facets)})")
    print(f"area: {mesh.total_area()!r}")
    print(f"diameter range: [{mesh.diameters.min()!r}, {mesh.diameters.max()!r}]")
    print(f"boundary tags: {mesh.tag_names}")
    if skipped:
        print(f"warning: skipped {skipped} unsupported elements")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feecflow",
                                 description="semi-implicit compatible-FE flow solver")
    sub = ap.add_subparsers(dest="command", required=True)

    sv = sub.add_parser("solve", help="run a benchmark case")
    sv.add_argument("case", choices=CASE_NAMES)
    sv.add_argument("--config", default=None, help="key=value config file")
    sv.add_argument("--n", type=int, default=None, help="mesh intervals per side")
    sv.add_argument("--degree", type=int, default=None, choices=(0, 1, 2))
    sv.add_argument("--cfl", type=float, default=None)
    sv.add_argument("--tend", type=float, default=None)
    sv.add_argument("--p0", type=float, default=1e7, help="Taylor-Green background pressure")
    sv.add_argument("--mu", type=float, default=0.01, help="viscosity (incompressible cases)")
    sv.add_argument("--limiter", choices=("on", "off"), default=None)
    sv.add_argument("--out", default="out")
    sv.add_argument("--threads", type=int, default=1)
    sv.add_argument("--seed", type=int, default=None)
    sv.add_argument("--snapshots", type=int, default=0, help="number of VTK snapshots")
    sv.set_defaults(fn=cmd_solve)

    rp = sub.add_parser("reproduce", help="reproduce a results table at desk scale")
    rp.add_argument("table", metavar="table-id", help="|".join(TABLE_IDS))
    rp.add_argument("--meshes", type=int, default=3)
    rp.add_argument("--out", default="out")
    rp.set_defaults(fn=cmd_reproduce)

    mi = sub.add_parser("mesh-info", help="inspect a Gmsh MSH 2.2 file")
    mi.add_argument("file")
    mi.set_defaults(fn=cmd_mesh_info)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StepFailure, PositivityError, NotSpdError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
