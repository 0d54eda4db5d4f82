import csv
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from macns.cli import KEYS, ConfigError, RunConfig, main, parse_config, render_config
from macns.fields import read_cell_csv


def test_minimal_config_defaults():
    cfg = parse_config("# nothing but a comment\n\n")
    assert cfg == RunConfig()
    assert cfg.command == "solve" and cfg.dimension == 2
    assert cfg.zeta_schedule == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert cfg.grid().shape == (16, 16)
    assert cfg.params().cs is None


def test_negative_viscosity_names_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("phys.gamma = 1.4\nphys.mu = -1\n")
    assert exc.value.line == 2
    assert str(exc.value) == "line 2: phys.mu = -1.0 violates the viscosity condition mu > 0"


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("phys.mu 0.1\n", 1, "expected"),
        ("\nphys.viscosity = 0.1\n", 2, "unknown key"),
        ("phys.mu = 0.1\nphys.mu = 0.2\n", 2, "duplicate"),
        ("phys.mu =\n", 1, "missing value"),
        ("phys.gamma = abc\n", 1, "bad value"),
        ("phys.gamma = 1.0\n", 1, "gamma"),
        ("phys.lambda = -0.5\n", 1, "lambda"),
        ("domain.dimension = 4\n", 1, "dimension"),
        ("solver.zeta_schedule = 0,0.5\n", 1, "zeta_schedule"),
        ("force.kind = mms\nforce.preset = trig2d\n", 2, "mass_source"),
        ("force.kind = file\n", 1, "force.path"),
        ("grid.cells_per_axis = 4\ngrid.lines_axis1 = 0,1\ngrid.lines_axis2 = 0,1\n", 1, "either"),
        ("domain.boxes = 0,1,0,1;2,3,0,1\n", 1, "grid line"),
        ("grid.cells_per_axis = 3\ndomain.boxes = 0,1,0,1;1,2,0,0.5\n", 2, "grid line"),
    ],
)
def test_config_errors(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert fragment in str(exc.value)


def test_gamma_warning_in_3d():
    cfg = parse_config("domain.dimension = 3\nphys.gamma = 2.0\n")
    assert len(cfg.warnings) == 1 and "gamma > 3" in cfg.warnings[0]
    assert parse_config("domain.dimension = 3\nphys.gamma = 3.5\n").warnings == ()
    assert parse_config("phys.gamma = 2.0\n").warnings == ()


def test_every_key_parses_and_round_trips(tmp_path):
    text = """
    run.command = study
    run.out = results
    run.seed = 4
    domain.dimension = 2
    domain.boxes = 0,1,0,1
    grid.cells_per_axis = 8
    phys.gamma = 1.6
    phys.mu = 0.2
    phys.lambda = 0.1
    phys.mass = 2.5
    scheme.cs = auto
    scheme.alpha = 1.5
    scheme.mass_source = on
    force.kind = mms
    force.preset = trig2d
    solver.zeta_schedule = 0, 0.5, 1
    solver.picard_tol = 1e-10
    solver.max_iters = 50
    solver.relaxation = 0.5
    solver.linear_solver = iterative
    study.levels = 4
    study.mode = mms
    verify.trials = 7
    """
    cfg = parse_config(text)
    assert cfg.cells_per_axis == (8, 8) and cfg.mass_source and cfg.study_levels == 4
    assert parse_config(render_config(cfg)) == cfg
    lines = parse_config("grid.lines_axis1 = 0,0.3,1\ngrid.lines_axis2 = 0,1\n")
    assert parse_config(render_config(lines)) == lines
    assert {k for k in KEYS if k.startswith("grid.lines")} == {f"grid.lines_axis{a}" for a in (1, 2, 3)}


floats = st.floats(0.01, 10.0, allow_nan=False)


@given(floats, st.floats(1.01, 5.0), floats, st.integers(2, 12), st.booleans(), st.integers(0, 99))
def test_round_trip_property(mu, gamma, mass, n, source, seed):
    cfg = RunConfig(mu=mu, gamma=gamma, mass=mass, cells_per_axis=(n, n + 1), mass_source=source, seed=seed,
                    force_vector=(mu, -mass))
    assert parse_config(render_config(cfg)) == cfg


def _write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


def test_main_solve_zero_force(tmp_path):
    cfg = _write(tmp_path, "grid.cells_per_axis = 6\nphys.mass = 2.0\n")
    out = tmp_path / "o"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    for name in ("rho.csv", "p.csv", "effective_viscous_flux.csv", "u1.csv", "u2.csv", "report.txt", "config.txt"):
        assert (out / name).exists()
    from macns.grid import uniform_square

    rho = read_cell_csv(out / "rho.csv", uniform_square(6))
    np.testing.assert_array_equal(rho, 2.0)
    with open(out / "u1.csv") as fh:
        rows = list(csv.reader(fh))
    assert all(float(r[-1]) == 0.0 for r in rows[1:])
    report = (out / "report.txt").read_text()
    assert "status: converged" in report


def test_main_file_forcing(tmp_path):
    from macns.grid import uniform_square

    g = uniform_square(6)
    with open(tmp_path / "f.csv", "w") as fh:
        fh.write("id,x,y,f1,f2\n")
        for k, (x, y) in enumerate(g.cell_centers):
            fh.write(f"{k},{float(x)!r},{float(y)!r},0.0,-1.0\n")
    cfg = _write(tmp_path, "grid.cells_per_axis = 6\nforce.kind = file\nforce.path = f.csv\n"
                           "solver.zeta_schedule = 0,0.5,1\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


def test_main_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, "phys.mu = -1\n")
    assert main(["solve", "--config", bad]) == 2
    assert "line 1: phys.mu" in capsys.readouterr().err
    assert main(["solve", "--config", str(tmp_path / "missing.cfg")]) == 2
    hard = _write(tmp_path, "grid.cells_per_axis = 8\nforce.kind = constant\nforce.vector = 0,-1\n"
                            "solver.zeta_schedule = 0,1\nsolver.max_iters = 1\n")
    assert main(["solve", "--config", hard, "--out", str(tmp_path / "h")]) == 1
    assert "status: failed" in (tmp_path / "h" / "report.txt").read_text()


def test_main_verify(tmp_path):
    cfg = _write(tmp_path, "grid.cells_per_axis = 4\nverify.trials = 2\n")
    out = tmp_path / "v"
    assert main(["verify", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    with open(out / "identities.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 * 7
    assert {r["pass"] for r in rows} == {"true", "n/a"}
    assert all(r["identity"] == "divcurl_curl" for r in rows if r["pass"] == "n/a")
    assert "seed = 3" in (out / "config.txt").read_text()


def test_main_study_mms(tmp_path):
    cfg = _write(tmp_path, "force.kind = mms\nforce.preset = trig2d\nscheme.mass_source = on\n"
                           "study.mode = mms\ngrid.cells_per_axis = 4\nsolver.zeta_schedule = 0,0.5,1\n")
    out = tmp_path / "s"
    assert main(["study", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "study.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].startswith("level,h,err_u_l2")


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, "grid.cells_per_axis = 3\n")
    r = subprocess.run([sys.executable, "-m", "macns", "solve", "--config", cfg, "--out", str(tmp_path / "m")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert r.stdout.startswith("solve: converged")
