"""Verification harness: identity suites, manufactured solutions, refinement
studies and stability probes."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import operators as op
from .fields import (
    AnalyticFunction,
    CellField,
    VelocityField,
    fortin_interpolate,
    project_cells,
)
from .grid import DomainSpec, MacGrid, build_grid, l_shape, mesh_size, uniform_square
from .scheme import Forcing, SchemeParams, State, mass_source_means, stabilization
from .solver import SolverConfig, solve, solve_mass

__all__ = [
    "IdentityReport",
    "MmsProblem",
    "ConvergenceStudy",
    "StabilityTable",
    "default_grid_family",
    "run_identity_suite",
    "diamond_mass_defect",
    "density_lower_bound",
    "mms_preset",
    "run_convergence_study",
    "probe_stability_constants",
    "restrict_cells",
    "restrict_faces",
]

IDENTITIES = (
    "duality",
    "hodge",
    "gradient_inner_product",
    "divcurl_div",
    "divcurl_curl",
    "fortin",
    "diamond_mass",
)


def default_grid_family() -> list:
    """Small 2D and 3D grids: uniform, graded, L- and T-shaped."""
    sq = DomainSpec.unit_box(2)
    graded = [np.array([0.0, 0.1, 0.35, 0.5, 0.8, 1.0]), np.array([0.0, 0.3, 0.4, 0.75, 1.0])]
    tee = DomainSpec(2, (((0.0, 1.0), (0.0, 1.0)), ((1.0, 2.0), (0.0, 0.5)), ((0.0, 0.5), (1.0, 2.0))))
    ell3 = DomainSpec(3, (((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), ((1.0, 2.0), (0.0, 1.0), (0.0, 0.5))))
    return [
        uniform_square(6),
        build_grid(sq, graded),
        build_grid(DomainSpec(2, (((0.0, 2.0), (0.0, 0.5)),)), (8, 4)),
        l_shape(4),
        build_grid(tee, (8, 8)),
        uniform_square(4, 3),
        build_grid(DomainSpec.unit_box(3), [np.array([0.0, 0.2, 0.7, 1.0]), np.array([0.0, 0.5, 0.6, 1.0]),
                                             np.array([0.0, 0.25, 0.5, 0.75, 1.0])]),
        build_grid(ell3, (4, 2, 2)),
    ]


def is_box_grid(g: MacGrid) -> bool:
    """True when the active cells fill the bounding lattice."""
    return bool(g.active.all())


@dataclass
class IdentityReport:
    """Largest absolute and relative defects over the trials, per identity."""

    grid: str
    seed: int
    trials: int
    max_abs: dict = field(default_factory=dict)
    max_rel: dict = field(default_factory=dict)

    def update(self, name: str, abs_defect: float, rel_defect: float):
        self.max_abs[name] = max(self.max_abs.get(name, 0.0), float(abs_defect))
        self.max_rel[name] = max(self.max_rel.get(name, 0.0), float(rel_defect))

    def to_text(self) -> str:
        out = [f"grid: {self.grid}", f"seed: {self.seed}", f"trials: {self.trials}"]
        for k in self.max_abs:
            out.append(f"{k}: max_abs={self.max_abs[k]:.17g} max_rel={self.max_rel[k]:.17g}")
        return "\n".join(out) + "\n"


def _random_velocity(g: MacGrid, rng) -> VelocityField:
    arrays = []
    for f in g.faces:
        a = rng.uniform(-1.0, 1.0, f.count)
        a[~f.is_interior] = 0.0
        arrays.append(a)
    return VelocityField.from_arrays(g, arrays)


def _random_bump(g: MacGrid, rng):
    """Vector field supported in one box of the domain, with its divergence.

    Each component is ``B(x) (c + a.x)`` with ``B`` the product of
    ``((x - lo)(hi - x))^3`` over the axes: C^2 across the box boundary and
    polynomial of degree <= 7 per axis, so fifth-order Gauss rules
    integrate it exactly on every cell.
    """
    box = g.spec.boxes[rng.integers(len(g.spec.boxes))]
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    d = g.dim
    scale = 1.0 / np.prod(((hi - lo) / 2.0) ** 6)
    coef = rng.uniform(-1.0, 1.0, d)
    slope = rng.uniform(-1.0, 1.0, (d, d))

    def parts(x):
        inside = np.all((x >= lo) & (x <= hi), axis=-1)
        t = np.clip((x - lo) * (hi - x), 0.0, None)
        b1 = t**3
        db1 = 3.0 * t**2 * (lo + hi - 2.0 * x)
        B = scale * np.prod(b1, axis=-1) * inside
        dB = np.empty(x.shape)
        for k in range(d):
            others = np.prod(np.delete(b1, k, axis=-1), axis=-1)
            dB[..., k] = scale * others * db1[..., k] * inside
        q = coef + x @ slope.T
        return B, dB, q

    def phi(x):
        B, _, q = parts(x)
        return B[..., None] * q

    def div(x):
        B, dB, q = parts(x)
        return np.sum(dB * q, axis=-1) + B * np.trace(slope)

    return AnalyticFunction(phi, vector=True), AnalyticFunction(div)


def diamond_mass_defect(s: State, params: SchemeParams, zeta: float = 1.0) -> list:
    """Per-direction largest relative defect of the dual-cell mass balance.

    When the mass equation holds, the outward dual fluxes of every interior
    dual cell sum to ``-c |D| (rho_D - rho_star)`` plus the dual mean of a
    mass source.  The defect of each dual cell is divided by its measure and
    by the size of the terms involved.
    """
    g = s.grid
    c = stabilization(g, params)
    rs = params.rho_star(g)
    F = op.mass_fluxes(s.rho, s.u)
    src = mass_source_means(g, params)
    out = []
    for i, rd in enumerate(op.dual_density(s.rho)):
        f = g.faces[i]
        ids = f.interior_ids
        D = op.dual_fluxes(F, i)
        bal = zeta * D.balance()[ids]
        dv = f.dual_volume[ids]
        source = f.dual_lo[ids] * src[f.lo_cell[ids]] + f.dual_hi[ids] * src[f.hi_cell[ids]]
        defect = (bal + c * dv * (rd.values[ids] - rs) - source) / dv
        size = zeta * np.abs(D.outward()[ids]).sum(axis=1) / dv + c * (rd.values[ids] + rs) + np.abs(source) / dv
        rel = np.abs(defect) / np.maximum(size.max(initial=0.0), np.finfo(float).tiny)
        out.append(float(rel.max(initial=0.0)))
    return out


def density_lower_bound(u: VelocityField, params: SchemeParams, zeta: float = 1.0) -> np.ndarray:
    """Per-cell lower bound on the density solving the mass equation for ``u``:

        c min|L| rho_star / (c |Omega| + zeta sum_{sigma in K} |sigma| |u_sigma|)
    """
    g = u.grid
    c = stabilization(g, params)
    flux = np.zeros(g.n_cells)
    for i, f in enumerate(g.faces):
        cf = g.cell_faces[i]
        for side in (0, 1):
            flux += f.measure[cf[:, side]] * np.abs(u[i].values[cf[:, side]])
    return c * g.cell_volumes.min() * params.rho_star(g) / (c * g.volume + zeta * flux)


def run_identity_suite(g: MacGrid, trials: int = 50, seed: int = 0, params: SchemeParams | None = None) -> IdentityReport:
    """Evaluate the discrete identities on pseudorandom fields."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    params = params or SchemeParams()
    rep = IdentityReport(grid=f"dim={g.dim} lattice={g.shape} cells={g.n_cells} h={mesh_size(g):.6g}", seed=seed,
                         trials=trials)
    eps = np.finfo(float).tiny
    for _ in range(trials):
        q = CellField(g, rng.uniform(-1.0, 1.0, g.n_cells))
        v = _random_velocity(g, rng)
        w = _random_velocity(g, rng)

        a = abs(q.dot(op.div_cells(v)) + op.grad_faces(q).dot(v))
        rep.update("duality", a, a / (1.0 + q.norm(2) * v.norm(2)))

        full = op.grad_full(v).inner(op.grad_full(w))
        dv, dw = op.div_cells(v), op.div_cells(w)
        hodge = full - dv.dot(dw) - op.curl_faces(v).inner(op.curl_faces(w))
        norms = op.h1_norm(v) * op.h1_norm(w)
        rep.update("hodge", abs(hodge), abs(hodge) / max(norms, eps))
        gi = op.laplacian_faces(v).dot(w) - op.h1_inner(v, w)
        rep.update("gradient_inner_product", abs(gi), abs(gi) / max(norms, eps))

        rho = CellField(g, rng.uniform(-1.0, 1.0, g.n_cells))
        pot = -op.grad_faces_ext(op.solve_primal_poisson(rho))
        dd = np.abs(op.div_cells(pot).values - rho.values).max()
        rep.update("divcurl_div", dd, dd / rho.norm(np.inf))
        cc = op.curl_faces(pot).max_abs()
        rep.update("divcurl_curl", cc, cc / max(pot.norm(np.inf), eps))

        phi, div_phi = _random_bump(g, rng)
        lhs = op.div_cells(fortin_interpolate(phi, g)).values
        rhs = project_cells(div_phi, g).values
        fd = np.abs(lhs - rhs).max()
        rep.update("fortin", fd, fd / (1.0 + np.abs(rhs).max()))

        uu = _random_velocity(g, rng)
        dens = solve_mass(uu, params)
        md = max(diamond_mass_defect(State(uu, dens, params.gamma), params))
        rep.update("diamond_mass", md * (1.0 + params.rho_star(g)), md)
    return rep


# ----------------------------------------------------------------------
# manufactured solutions

@dataclass(frozen=True)
class MmsProblem:
    """Exact velocity and density with the sources that make them solve the
    continuous problem.  ``mass_source`` is None when the exact state needs
    none."""

    name: str
    spec: DomainSpec
    u: AnalyticFunction
    rho: AnalyticFunction
    forcing: AnalyticFunction
    mass_source: AnalyticFunction | None
    mass: float
    gamma: float
    mu: float
    lam: float

    def params(self, base: SchemeParams, mass_source: bool) -> SchemeParams:
        if self.mass_source is not None and not mass_source:
            raise ValueError(f"manufactured solution {self.name!r} needs the mass source extension enabled")
        return replace(
            base,
            gamma=self.gamma,
            mu=self.mu,
            lam=self.lam,
            mass=self.mass,
            forcing=Forcing("mms", function=self.forcing),
            mass_source=self.mass_source,
        )


MMS_PRESETS = ("rest", "trig2d")


def _rest(spec: DomainSpec, params: SchemeParams) -> MmsProblem:
    d = spec.dimension
    vol = sum(np.prod([hi - lo for lo, hi in b]) for b in spec.boxes)
    rs = params.mass / vol
    zero_v = AnalyticFunction(lambda x: np.zeros(x.shape[:-1] + (d,)), vector=True)
    return MmsProblem("rest", spec, zero_v, AnalyticFunction(lambda x: np.full(x.shape[:-1], rs)), zero_v, None,
                      params.mass, params.gamma, params.mu, params.lam)


def _trig2d(spec: DomainSpec, params: SchemeParams, amplitude: float = 0.5) -> MmsProblem:
    if spec != DomainSpec.unit_box(2):
        raise ValueError("the trig2d manufactured solution lives on the unit square")
    A = amplitude
    gam, mu, lam, M = params.gamma, params.mu, params.lam, params.mass
    c0 = M / (1.0 + 0.4 / np.pi**2)
    pi = np.pi

    def trig(x):
        X, Y = x[..., 0], x[..., 1]
        return np.sin(pi * X), np.cos(pi * X), np.sin(pi * Y), np.cos(pi * Y), X, Y

    def vel(x):
        sx, cx, sy, cy, X, Y = trig(x)
        return np.stack([2 * pi * A * sx**2 * sy * cy, -2 * pi * A * sx * cx * sy**2], axis=-1)

    def dens(x):
        sx, cx, sy, cy, X, Y = trig(x)
        return c0 * (1.0 + 0.1 * sx * sy)

    def dens_grad(x):
        sx, cx, sy, cy, X, Y = trig(x)
        return 0.1 * c0 * pi * np.stack([cx * sy, sx * cy], axis=-1)

    def vel_grad(x):
        # J[..., i, j] = d u_i / d x_j
        sx, cx, sy, cy, X, Y = trig(x)
        J = np.empty(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = 4 * pi**2 * A * sx * cx * sy * cy
        J[..., 0, 1] = 2 * pi**2 * A * sx**2 * np.cos(2 * pi * Y)
        J[..., 1, 0] = -2 * pi**2 * A * np.cos(2 * pi * X) * sy**2
        J[..., 1, 1] = -J[..., 0, 0]
        return J

    def vel_lap(x):
        X, Y = x[..., 0], x[..., 1]
        l1 = 2 * pi**3 * A * np.sin(2 * pi * Y) * (2 * np.cos(2 * pi * X) - 1.0)
        l2 = -2 * pi**3 * A * np.sin(2 * pi * X) * (2 * np.cos(2 * pi * Y) - 1.0)
        return np.stack([l1, l2], axis=-1)

    def source(x):
        return np.sum(vel(x) * dens_grad(x), axis=-1)

    def force(x):
        u = vel(x)
        r = dens(x)
        conv = r[..., None] * np.einsum("...ij,...j->...i", vel_grad(x), u) + u * source(x)[..., None]
        grad_p = (gam * r ** (gam - 1.0))[..., None] * dens_grad(x)
        return conv + grad_p - mu * vel_lap(x)

    return MmsProblem("trig2d", spec, AnalyticFunction(vel, vector=True), AnalyticFunction(dens),
                      AnalyticFunction(force, vector=True), AnalyticFunction(source), M, gam, mu, lam)


def mms_preset(name: str, spec: DomainSpec, params: SchemeParams | None = None) -> MmsProblem:
    """Named manufactured solution.

    ``rest``: u = 0 and constant density on any domain, no sources.
    ``trig2d``: divergence-free velocity from the stream function
    0.5 sin^2(pi x) sin^2(pi y) and density proportional to
    1 + 0.1 sin(pi x) sin(pi y) on the unit square; needs a mass source.
    """
    params = params or SchemeParams()
    if name == "rest":
        return _rest(spec, params)
    if name == "trig2d":
        return _trig2d(spec, params)
    raise ValueError(f"unknown manufactured solution {name!r}; choose from {MMS_PRESETS}")


# ----------------------------------------------------------------------
# nested-grid restriction

def _coarse_index(lines: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(lines, x, side="right") - 1, 0, lines.size - 2)


def _line_index(lines: np.ndarray, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    k = np.clip(np.searchsorted(lines, x), 0, lines.size - 1)
    k0 = np.clip(k - 1, 0, lines.size - 1)
    k = np.where(np.abs(lines[k0] - x) < np.abs(lines[k] - x), k0, k)
    return np.where(np.abs(lines[k] - x) <= tol * max(1.0, np.abs(lines).max()), k, -1)


def _check_nested(fine: MacGrid, coarse: MacGrid):
    if fine.spec != coarse.spec:
        raise ValueError("restriction needs grids of the same domain")
    for a in range(fine.dim):
        if np.any(_line_index(fine.lines[a], coarse.lines[a]) < 0):
            raise ValueError(f"coarse grid lines on axis {a + 1} are not fine grid lines")


def restrict_cells(q: CellField, coarse: MacGrid) -> CellField:
    """Volume-weighted means of a fine cell field over nested coarse cells."""
    fine = q.grid
    _check_nested(fine, coarse)
    lat = np.stack([_coarse_index(coarse.lines[a], fine.cell_centers[:, a]) for a in range(fine.dim)], axis=1)
    target = coarse.cell_ids[tuple(lat.T)]
    num = np.bincount(target, weights=fine.cell_volumes * q.values, minlength=coarse.n_cells)
    return CellField(coarse, num / coarse.cell_volumes)


def restrict_faces(u: VelocityField, coarse: MacGrid) -> VelocityField:
    """Area-weighted means of fine face values over nested coarse faces."""
    fine = u.grid
    _check_nested(fine, coarse)
    arrays = []
    for i in range(fine.dim):
        ff, cf = fine.faces[i], coarse.faces[i]
        k = _line_index(coarse.lines[i], ff.centers[:, i])
        on = k >= 0
        lat = np.empty((int(on.sum()), fine.dim), dtype=np.int64)
        for a in range(fine.dim):
            lat[:, a] = k[on] if a == i else _coarse_index(coarse.lines[a], ff.centers[on, a])
        target = cf.ids[tuple(lat.T)]
        num = np.bincount(target, weights=ff.measure[on] * u[i].values[on], minlength=cf.count)
        vals = num / cf.measure
        vals[~cf.is_interior] = 0.0
        arrays.append(vals)
    return VelocityField.from_arrays(coarse, arrays)


# ----------------------------------------------------------------------
# refinement studies

STUDY_COLUMNS = ("level", "h", "err_u_l2", "err_u_h1", "err_rho_l2", "err_p_l2", "order_u", "order_rho")


@dataclass
class ConvergenceStudy:
    mode: str
    rows: list
    failures: list = field(default_factory=list)
    reference_h: float | None = None

    @property
    def complete(self) -> bool:
        return not self.failures

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)

    def strictly_decreasing(self, key: str) -> bool:
        e = self.column(key)
        return bool(e.size >= 2 and np.all(np.diff(e) < 0))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STUDY_COLUMNS)
            for r in self.rows:
                w.writerow([r["level"]] + [("" if r[k] is None else f"{r[k]:.17g}") for k in STUDY_COLUMNS[1:]])

    def to_text(self) -> str:
        out = [f"mode: {self.mode}", f"levels: {len(self.rows)}", f"complete: {str(self.complete).lower()}"]
        if self.reference_h is not None:
            out.append(f"reference_h: {self.reference_h:.17g}")
        for r in self.rows:
            out.append(" ".join(f"{k}={'' if r[k] is None else format(r[k], '.10g')}" for k in STUDY_COLUMNS))
        for f in self.failures:
            out.append(f"failure: {f}")
        for key in ("err_u_l2", "err_rho_l2"):
            out.append(f"{key}_strictly_decreasing: {str(self.strictly_decreasing(key)).lower()}")
        return "\n".join(out) + "\n"


def _errors(s: State, u_ref: VelocityField, rho_ref: CellField, gamma: float) -> dict:
    du = s.u - u_ref
    p_ref = CellField(rho_ref.grid, rho_ref.values**gamma)
    return {
        "err_u_l2": du.norm(2),
        "err_u_h1": op.h1_norm(du),
        "err_rho_l2": (s.rho - rho_ref).norm(2),
        "err_p_l2": (s.p - p_ref).norm(2),
    }


def _with_orders(rows: list) -> list:
    for k, r in enumerate(rows):
        r["order_u"] = r["order_rho"] = None
        if k == 0:
            continue
        prev = rows[k - 1]
        ratio = np.log(prev["h"] / r["h"])
        for key, err in (("order_u", "err_u_l2"), ("order_rho", "err_rho_l2")):
            if prev[err] > 0 and r[err] > 0:
                r[key] = float(np.log(prev[err] / r[err]) / ratio)
    return rows


def _refinements(spec: DomainSpec, base, levels: int) -> list:
    base = np.broadcast_to(np.asarray(base, dtype=int), (spec.dimension,))
    return [build_grid(spec, tuple(int(n) * 2**k for n in base)) for k in range(levels)]


def run_convergence_study(problem, levels: int, params: SchemeParams, config: SolverConfig | None = None,
                          base=8, mass_source: bool = False) -> ConvergenceStudy:
    """Solve on ``levels`` uniform refinements with base cell counts ``base``.

    ``problem`` is an :class:`MmsProblem` (errors against the projections of
    the exact fields) or a :class:`DomainSpec` (reference mode: errors
    against one further refinement, restricted by nested means).
    """
    if levels < 3:
        raise ValueError("a study needs at least 3 levels")
    config = config or SolverConfig()
    if isinstance(problem, MmsProblem):
        mode = "mms"
        spec = problem.spec
        params = problem.params(params, mass_source)
        grids = _refinements(spec, base, levels)
        ref = None
    elif isinstance(problem, DomainSpec):
        mode = "reference"
        spec = problem
        grids = _refinements(spec, base, levels + 1)
        ref_grid = grids.pop()
        rep = solve(ref_grid, params, config)
        if not rep.converged:
            return ConvergenceStudy(mode, [], [f"reference level h={mesh_size(ref_grid):.6g}: {rep.message}"],
                                    mesh_size(ref_grid))
        ref = rep.state
    else:
        raise TypeError("problem must be an MmsProblem or a DomainSpec")

    rows, failures = [], []
    for k, g in enumerate(grids):
        rep = solve(g, params, config)
        if not rep.converged:
            failures.append(f"level {k} h={mesh_size(g):.6g}: {rep.message}")
            break
        if ref is None:
            u_ref = fortin_interpolate(problem.u, g)
            rho_ref = project_cells(problem.rho, g)
        else:
            u_ref = restrict_faces(ref.u, g)
            rho_ref = restrict_cells(ref.rho, g)
        row = {"level": k, "h": mesh_size(g)}
        row.update(_errors(rep.state, u_ref, rho_ref, params.gamma))
        rows.append(row)
    return ConvergenceStudy(mode, _with_orders(rows), failures, None if ref is None else mesh_size(ref.grid))


# ----------------------------------------------------------------------
# stability probes

PROBE_KEYS = ("u_h1_norm", "p_l2_norm", "rho_l2gamma_norm", "weak_bv_beta2", "weak_bv_beta_gamma", "sobolev_ratio")


@dataclass
class StabilityTable:
    """Solution norms per grid.

    ``growth`` is the ratio finest/second-finest of each quantity and
    ``variation`` its relative change |finest/second - 1|; the table is
    ``bounded`` when no quantity grows by more than ``growth_tol``.
    """

    rows: list
    failures: list
    growth_tol: float = 0.1

    def _ratio(self, key):
        if len(self.rows) < 2:
            return np.nan
        a, b = self.rows[-2][key], self.rows[-1][key]
        if a == 0.0:
            return 1.0 if b == 0.0 else np.inf
        return b / a

    @property
    def growth(self) -> dict:
        return {k: self._ratio(k) for k in PROBE_KEYS}

    @property
    def variation(self) -> dict:
        return {k: abs(v - 1.0) for k, v in self.growth.items()}

    @property
    def bounded(self) -> bool:
        return not self.failures and len(self.rows) >= 2 and all(v <= 1.0 + self.growth_tol for v in self.growth.values())

    def to_text(self) -> str:
        out = ["h " + " ".join(PROBE_KEYS)]
        for r in self.rows:
            out.append(f"{r['h']:.17g} " + " ".join(f"{r[k]:.17g}" for k in PROBE_KEYS))
        for k, v in self.growth.items():
            out.append(f"growth {k}: {v:.6g}")
        out.append(f"bounded: {str(self.bounded).lower()}")
        out += [f"failure: {f}" for f in self.failures]
        return "\n".join(out) + "\n"


def sobolev_ratio(u: VelocityField) -> float:
    """|u|_{L^q} / |u|_{1,E,0} with q = 4 in 2D and 6 in 3D (0 for u = 0)."""
    q = 4.0 if u.grid.dim == 2 else 6.0
    n1 = op.h1_norm(u)
    return 0.0 if n1 == 0.0 else u.norm(q) / n1


def probe_stability_constants(grids, params: SchemeParams, config: SolverConfig | None = None,
                              growth_tol: float = 0.1) -> StabilityTable:
    """Solve on each grid (coarse to fine) and tabulate the solution norms."""
    rows, failures = [], []
    for g in grids:
        rep = solve(g, params, config)
        if not rep.converged:
            failures.append(f"h={mesh_size(g):.6g}: {rep.message}")
            continue
        d = rep.diagnostics
        row = {"h": mesh_size(g)}
        row.update({k: d[k] for k in PROBE_KEYS if k in d})
        row["sobolev_ratio"] = sobolev_ratio(rep.state.u)
        rows.append(row)
    return StabilityTable(rows, failures, growth_tol)
