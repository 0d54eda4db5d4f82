"""Command line front end.

Usage::

    macns {solve,verify,study} --config run.cfg [--out DIR] [--seed N]

The configuration is a flat list of ``section.key = value`` lines; ``#``
starts a comment.  Exit status: 0 success, 1 solver or check failure,
2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import operators as op
from .fields import read_cell_csv, write_cell_csv, write_face_csv
from .grid import DomainSpec, build_grid
from .scheme import Forcing, SchemeParams
from .solver import LINEAR_SOLVERS, SolverConfig, solve

COMMANDS = ("solve", "verify", "study")
FORCE_KINDS = ("constant", "gravity", "rho-gravity", "mms", "file")
STUDY_MODES = ("mms", "reference")

# identity thresholds used by ``verify`` (relative, except the Fortin check)
VERIFY_LIMITS = {
    "duality": 1e-12,
    "hodge": 1e-11,
    "gradient_inner_product": 1e-11,
    "divcurl_div": 1e-10,
    "divcurl_curl": 1e-12,
    "fortin": 1e-9,
    "diamond_mass": 1e-11,
}


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


@dataclass(frozen=True)
class RunConfig:
    command: str = "solve"
    dimension: int = 2
    boxes: tuple | None = None
    cells_per_axis: tuple | None = None
    lines: tuple | None = None
    gamma: float = 1.4
    mu: float = 0.1
    lam: float = 0.0
    mass: float = 1.0
    cs: float | None = None
    alpha: float = 2.0
    force_kind: str = "constant"
    force_vector: tuple | None = None
    force_preset: str | None = None
    force_path: str | None = None
    mass_source: bool = False
    zeta_schedule: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    picard_tol: float = 1e-9
    max_iters: int = 200
    relaxation: float = 0.7
    linear_solver: str = "direct-sparse"
    study_levels: int = 3
    study_mode: str = "reference"
    trials: int = 50
    out: str = "out"
    seed: int = 0
    warnings: tuple = field(default=(), compare=False)

    # derived objects
    def domain(self) -> DomainSpec:
        boxes = self.boxes or (((0.0, 1.0),) * self.dimension,)
        return DomainSpec(self.dimension, boxes)

    def refinement(self):
        if self.lines is not None:
            return [np.array(x) for x in self.lines]
        return self.cells_per_axis or (16,) * self.dimension

    def grid(self):
        return build_grid(self.domain(), self.refinement())

    def forcing(self, g=None, base: Path | None = None) -> Forcing:
        d = self.dimension
        vec = self.force_vector or (0.0,) * d
        if self.force_kind in ("constant", "gravity", "rho-gravity"):
            return Forcing(self.force_kind, tuple(vec))
        if self.force_kind == "mms":
            return Forcing("mms", function=self.mms_problem().forcing)
        path = Path(self.force_path)
        if base is not None and not path.is_absolute():
            path = base / path
        return Forcing("file", cell_values=read_cell_csv(path, g if g is not None else self.grid(), columns=d))

    def mms_problem(self):
        return dg.mms_preset(self.force_preset or "rest", self.domain(), self._base_params())

    def _base_params(self) -> SchemeParams:
        return SchemeParams(gamma=self.gamma, mu=self.mu, lam=self.lam, mass=self.mass, cs=self.cs, alpha=self.alpha)

    def params(self, g=None, base: Path | None = None) -> SchemeParams:
        p = replace(self._base_params(), forcing=self.forcing(g, base))
        if self.force_kind == "mms":
            return self.mms_problem().params(p, self.mass_source)
        return p

    def solver_config(self) -> SolverConfig:
        return SolverConfig(zeta_schedule=self.zeta_schedule, picard_tol=self.picard_tol, max_iters=self.max_iters,
                            relaxation=self.relaxation, linear_solver=self.linear_solver)


# ----------------------------------------------------------------------
# value parsers

def _float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError(f"{s!r} is not a finite number")
    return v


def _int(s: str) -> int:
    return int(s)


def _floats(s: str) -> tuple:
    return tuple(_float(x) for x in s.split(","))


def _ints(s: str) -> tuple:
    return tuple(_int(x) for x in s.split(","))


def _boxes(s: str) -> tuple:
    out = []
    for part in s.split(";"):
        v = _floats(part)
        if len(v) % 2:
            raise ValueError(f"box {part.strip()!r} needs lo,hi pairs")
        out.append(tuple((v[k], v[k + 1]) for k in range(0, len(v), 2)))
    return tuple(out)


def _bool(s: str) -> bool:
    t = s.lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"{s!r} is not on/off")


def _choice(options):
    def parse(s):
        if s not in options:
            raise ValueError(f"{s!r} is not one of {', '.join(options)}")
        return s
    return parse


def _cs(s: str):
    return None if s == "auto" else _float(s)


def _word(s: str) -> str:
    return s


# key -> (attribute, parser)
KEYS = {
    "run.command": ("command", _choice(COMMANDS)),
    "run.out": ("out", _word),
    "run.seed": ("seed", _int),
    "domain.dimension": ("dimension", _int),
    "domain.boxes": ("boxes", _boxes),
    "grid.cells_per_axis": ("cells_per_axis", _ints),
    "grid.lines_axis1": ("lines", _floats),
    "grid.lines_axis2": ("lines", _floats),
    "grid.lines_axis3": ("lines", _floats),
    "phys.gamma": ("gamma", _float),
    "phys.mu": ("mu", _float),
    "phys.lambda": ("lam", _float),
    "phys.mass": ("mass", _float),
    "scheme.cs": ("cs", _cs),
    "scheme.alpha": ("alpha", _float),
    "scheme.mass_source": ("mass_source", _bool),
    "force.kind": ("force_kind", _choice(FORCE_KINDS)),
    "force.vector": ("force_vector", _floats),
    "force.preset": ("force_preset", _choice(dg.MMS_PRESETS)),
    "force.path": ("force_path", _word),
    "solver.zeta_schedule": ("zeta_schedule", _floats),
    "solver.picard_tol": ("picard_tol", _float),
    "solver.max_iters": ("max_iters", _int),
    "solver.relaxation": ("relaxation", _float),
    "solver.linear_solver": ("linear_solver", _choice(LINEAR_SOLVERS)),
    "study.levels": ("study_levels", _int),
    "study.mode": ("study_mode", _choice(STUDY_MODES)),
    "verify.trials": ("trials", _int),
}


def parse_config(text: str, command: str | None = None) -> RunConfig:
    """Parse and validate a configuration document.

    ``command`` (from the command line) overrides ``run.command``.  Raises
    :class:`ConfigError` naming the line of the first problem.
    """
    values, where = {}, {}
    lines_axes = {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", num)
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", num)
        if key in where:
            raise ConfigError(f"duplicate key {key!r} (first on line {where[key]})", num)
        if not val:
            raise ConfigError(f"missing value for {key!r}", num)
        attr, parser = KEYS[key]
        try:
            parsed = parser(val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", num) from None
        where[key] = num
        if attr == "lines":
            lines_axes[int(key[-1])] = (parsed, num)
        else:
            values[attr] = parsed
    if lines_axes:
        values["lines"] = lines_axes
    if command is not None:
        values["command"] = _choice(COMMANDS)(command)
    return _validate(values, where)


def _validate(values: dict, where: dict) -> RunConfig:
    def fail(msg, *keys):
        line = next((where[k] for k in keys if k in where), None)
        raise ConfigError(msg, line)

    d = values.get("dimension", 2)
    if d not in (2, 3):
        fail(f"domain.dimension must be 2 or 3, got {d}", "domain.dimension")
    boxes = values.get("boxes")
    if boxes is not None:
        for b in boxes:
            if len(b) != d:
                fail(f"each box needs {d} lo,hi pairs", "domain.boxes")
    if "cells_per_axis" in values and "lines" in values:
        fail("give either grid.cells_per_axis or grid.lines_axis*, not both", "grid.cells_per_axis")
    cpa = values.get("cells_per_axis")
    if cpa is not None:
        if len(cpa) == 1:
            cpa = cpa * d
        if len(cpa) != d or min(cpa) < 1:
            fail(f"grid.cells_per_axis needs 1 or {d} positive integers", "grid.cells_per_axis")
        values["cells_per_axis"] = tuple(cpa)
    if "lines" in values:
        axes = values["lines"]
        if sorted(axes) != list(range(1, d + 1)):
            fail(f"grid.lines_axis1..{d} must all be given", *(f"grid.lines_axis{a}" for a in sorted(axes)))
        for a in range(1, d + 1):
            x, _ = axes[a]
            if len(x) < 2 or np.any(np.diff(x) <= 0):
                fail(f"grid.lines_axis{a} must be strictly increasing", f"grid.lines_axis{a}")
        values["lines"] = tuple(axes[a][0] for a in range(1, d + 1))

    mu, lam = values.get("mu", 0.1), values.get("lam", 0.0)
    if not mu > 0:
        fail(f"phys.mu = {mu} violates the viscosity condition mu > 0", "phys.mu")
    if lam + 2.0 * mu / d < 0:
        fail(f"phys.lambda = {lam} violates lambda + 2 mu / d >= 0", "phys.lambda", "phys.mu")
    gamma = values.get("gamma", 1.4)
    if not gamma > 1:
        fail(f"phys.gamma must exceed 1, got {gamma}", "phys.gamma")
    if not values.get("mass", 1.0) > 0:
        fail("phys.mass must be positive", "phys.mass")
    cs = values.get("cs")
    if cs is not None and not cs > 0:
        fail("scheme.cs must be auto or positive", "scheme.cs")
    if not values.get("alpha", 2.0) > 1:
        fail("scheme.alpha must exceed 1", "scheme.alpha")

    kind = values.get("force_kind", "constant")
    vec = values.get("force_vector")
    if vec is not None and len(vec) != d:
        fail(f"force.vector needs {d} components", "force.vector")
    if kind == "file" and "force_path" not in values:
        fail("force.kind = file needs force.path", "force.kind")
    if kind != "file" and "force_path" in values:
        fail("force.path is only used with force.kind = file", "force.path")
    if kind != "mms" and "force_preset" in values:
        fail("force.preset is only used with force.kind = mms", "force.preset")
    if kind == "mms":
        preset = values.get("force_preset", "rest")
        if preset == "trig2d":
            if d != 2 or (boxes is not None and boxes != (((0.0, 1.0), (0.0, 1.0)),)):
                fail("force.preset = trig2d needs the 2D unit square", "force.preset")
            if not values.get("mass_source", False):
                fail("force.preset = trig2d needs scheme.mass_source = on", "force.preset")

    z = values.get("zeta_schedule")
    if z is not None and (len(z) < 2 or z[0] != 0.0 or z[-1] != 1.0 or np.any(np.diff(z) <= 0)):
        fail("solver.zeta_schedule must increase strictly from 0 to 1", "solver.zeta_schedule")
    if not 0 < values.get("picard_tol", 1e-9) < 1:
        fail("solver.picard_tol must lie in (0, 1)", "solver.picard_tol")
    if values.get("max_iters", 200) < 1:
        fail("solver.max_iters must be positive", "solver.max_iters")
    if not 0 < values.get("relaxation", 0.7) <= 1:
        fail("solver.relaxation must lie in (0, 1]", "solver.relaxation")
    if values.get("study_levels", 3) < 3:
        fail("study.levels must be at least 3", "study.levels")
    if values.get("study_mode") == "mms" and kind != "mms":
        fail("study.mode = mms needs force.kind = mms", "study.mode", "force.kind")
    if values.get("command") == "study" and values.get("study_mode", "reference") == "reference" and kind == "file":
        fail("reference studies cannot use sampled forcing (it is tied to one grid)", "study.mode", "force.kind")
    if values.get("trials", 50) < 1:
        fail("verify.trials must be positive", "verify.trials")
    if values.get("seed", 0) < 0:
        fail("run.seed must be nonnegative", "run.seed")

    notes = []
    if d == 3 and gamma <= 3:
        notes.append(f"gamma = {gamma} in 3D: the convergence theory requires gamma > 3")
    cfg = RunConfig(**values, warnings=tuple(notes))
    try:
        cfg.domain()
    except ValueError as exc:
        fail(str(exc), "domain.boxes", "domain.dimension")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg.grid()
    except ValueError as exc:
        fail(str(exc), "domain.boxes", "grid.cells_per_axis", "grid.lines_axis1")
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def render_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` (every field written explicitly)."""
    out = []
    for key, (attr, _) in KEYS.items():
        v = getattr(cfg, attr)
        if attr == "lines":
            a = int(key[-1])
            if v is None or a > cfg.dimension:
                continue
            out.append(f"{key} = {_fmt(tuple(v[a - 1]))}")
            continue
        if v is None:
            if attr == "cs":
                out.append(f"{key} = auto")
            continue
        if attr == "boxes":
            out.append(f"{key} = " + ";".join(",".join(repr(float(c)) for p in b for c in p) for b in v))
            continue
        out.append(f"{key} = {_fmt(v)}")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------
# commands

def _write_state(out: Path, state, params) -> None:
    write_cell_csv(out / "rho.csv", state.rho)
    write_cell_csv(out / "p.csv", state.p)
    write_cell_csv(out / "effective_viscous_flux.csv",
                   op.effective_viscous_flux(state.p, state.u, params.mu, params.lam))
    for i in range(state.grid.dim):
        write_face_csv(out / f"u{i + 1}.csv", state.u[i])


def _run_solve(cfg: RunConfig, out: Path, base: Path) -> int:
    g = cfg.grid()
    params = cfg.params(g, base)
    rep = solve(g, params, cfg.solver_config())
    _write_state(out, rep.state, params)
    (out / "report.txt").write_text(g.summary() + rep.to_text())
    print(f"solve: {rep.status} ({rep.message or 'ok'})")
    return 0 if rep.converged else 1


def _run_verify(cfg: RunConfig, out: Path, base: Path) -> int:
    grids = dg.default_grid_family()
    grids.append(cfg.grid())
    ok = True
    lines = []
    with open(out / "identities.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "identity", "max_abs", "max_rel", "limit", "pass"])
        for k, g in enumerate(grids):
            rep = dg.run_identity_suite(g, cfg.trials, cfg.seed + k)
            lines.append(rep.to_text())
            for name, limit in VERIFY_LIMITS.items():
                value = rep.max_abs[name] if name == "fortin" else rep.max_rel[name]
                if name == "divcurl_curl" and not dg.is_box_grid(g):
                    status = "n/a"
                else:
                    status = "true" if value <= limit else "false"
                    ok &= status == "true"
                w.writerow([rep.grid, name, f"{rep.max_abs[name]:.17g}", f"{rep.max_rel[name]:.17g}", f"{limit:.3g}",
                            status])
    lines.append(f"all_identities_pass: {str(ok).lower()}")
    lines.append("divcurl_curl is checked on box grids only; at reentrant corners it is not an identity")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print(f"verify: {'pass' if ok else 'FAIL'} on {len(grids)} grids")
    return 0 if ok else 1


def _run_study(cfg: RunConfig, out: Path, base: Path) -> int:
    params = cfg.params(None, base)
    if cfg.study_mode == "mms":
        problem = cfg.mms_problem()
    else:
        problem = cfg.domain()
    st = dg.run_convergence_study(problem, cfg.study_levels, params, cfg.solver_config(),
                                  base=cfg.cells_per_axis or 8, mass_source=cfg.mass_source)
    st.write_csv(out / "study.csv")
    (out / "report.txt").write_text(st.to_text())
    print(f"study: {'complete' if st.complete else 'incomplete'} ({len(st.rows)} levels)")
    return 0 if st.complete else 1


def run(cfg: RunConfig, base: Path | None = None) -> int:
    base = base or Path.cwd()
    out = Path(cfg.out)
    if not out.is_absolute():
        out = Path.cwd() / out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render_config(cfg))
    for msg in cfg.warnings:
        warnings.warn(msg, stacklevel=2)
    if cfg.command == "study" and cfg.lines is not None:
        raise ConfigError("study needs grid.cells_per_axis (uniform refinements), not grid.lines_axis*")
    handler = {"solve": _run_solve, "verify": _run_verify, "study": _run_study}[cfg.command]
    return handler(cfg, out, base)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="macns", description="MAC scheme for stationary compressible Navier-Stokes")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="flat section.key = value file")
    ap.add_argument("--out", help="output directory (overrides run.out)")
    ap.add_argument("--seed", type=int, help="random seed (overrides run.seed)")
    args = ap.parse_args(argv)
    path = Path(args.config)
    try:
        cfg = parse_config(path.read_text(encoding="utf-8"), command=args.command)
        over = {}
        if args.out is not None:
            over["out"] = args.out
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            over["seed"] = args.seed
        cfg = replace(cfg, **over)
        for msg in cfg.warnings:
            print(f"warning: {msg}", file=sys.stderr)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return run(cfg, path.parent)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # inconsistent combinations only detectable once the grid exists
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
