import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from feecflow.cli import ConfigError, main, parse_config


def run_cli(*args):
    return main(list(args))


def test_parse_defaults():
    cfg = parse_config()
    assert cfg.case == "taylor_green"
    assert cfg.limiter is True


def test_unknown_key_rejected(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("[run]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="foo"):
        parse_config(str(f))


def test_config_file_sections(tmp_path):
    f = tmp_path / "ok.cfg"
    f.write_text("[case]\ncase = shu_vortex\nn = 12\n[run]\nlimiter = off\ncfl = 0.2\n")
    cfg = parse_config(str(f))
    assert cfg.case == "shu_vortex" and cfg.n == 12
    assert cfg.limiter is False and cfg.cfl == 0.2


def test_unknown_case():
    with pytest.raises(ConfigError):
        parse_config(None, dict(case="bogus"))


def test_solve_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = run_cli("solve", "taylor_green", "--n", "6", "--degree", "0",
                 "--tend", "0.2", "--out", str(out), "--snapshots", "2")
    assert rc == 0
    assert (out / "diagnostics.csv").exists()
    assert (out / "provenance.txt").exists()
    assert (out / "taylor_green_final.vtk").exists()
    header = (out / "diagnostics.csv").read_text().splitlines()
    assert header[0].startswith("#")
    assert any("n=6" in ln for ln in header if ln.startswith("#"))
    ncols = header[[i for i, ln in enumerate(header) if not ln.startswith("#")][0]].count(",")
    assert ncols >= 9


def test_solve_diagnostics_row_count(tmp_path):
    out = tmp_path / "rows"
    rc = run_cli("solve", "taylor_green", "--n", "6", "--degree", "0",
                 "--tend", "1.0", "--out", str(out))
    assert rc == 0
    rows = [ln for ln in (out / "diagnostics.csv").read_text().splitlines()
            if ln and not ln.startswith("#")]
    # one header + one row per step + initial row
    body = rows[1:]
    nsteps = len(body) - 1
    assert nsteps >= 1


def test_determinism_bit_identical(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"d{k}"
        rc = run_cli("solve", "shu_vortex", "--n", "8", "--degree", "1",
                     "--tend", "0.1", "--seed", "42", "--out", str(out))
        assert rc == 0
        text = (out / "diagnostics.csv").read_text()
        outs.append("\n".join(ln for ln in text.splitlines()
                               if not ln.startswith("# out=")))
    assert outs[0] == outs[1]


def test_exit_code_config_error(tmp_path):
    rc = run_cli("solve", "taylor_green", "--config", str(tmp_path / "missing.cfg"))
    assert rc == 2


def test_reproduce_refuses_two_meshes(tmp_path):
    rc = run_cli("reproduce", "shu_r1", "--meshes", "2", "--out", str(tmp_path))
    assert rc == 2


def test_reproduce_unknown_table(tmp_path):
    rc = run_cli("reproduce", "bogus_table", "--out", str(tmp_path))
    assert rc == 2


def test_mesh_info(tmp_path, capsys):
    from feecflow.mesh import export_gmsh_ascii, generate_rect_mesh

    m = generate_rect_mesh(3, 3)
    path = tmp_path / "m.msh"
    export_gmsh_ascii(m, str(path))
    rc = run_cli("mesh-info", str(path))
    assert rc == 0
    out = capsys.readouterr().out
    assert "triangles: 18" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "feecflow.cli", "mesh-info", "/nonexistent.msh"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_vtk_content(tmp_path):
    out = tmp_path / "v"
    run_cli("solve", "taylor_green", "--n", "5", "--degree", "0", "--tend", "0.1",
            "--out", str(out))
    vtk = (out / "taylor_green_final.vtk").read_text()
    assert "UNSTRUCTURED_GRID" in vtk
    assert "CELL_DATA" in vtk and "POINT_DATA" in vtk
    assert "SCALARS rho" in vtk and "VECTORS velocity" in vtk
