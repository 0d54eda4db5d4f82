"""Homotopy continuation in zeta with fixed-point inner iterations."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import operators as op
from .fields import CellField, VelocityField
from .grid import MacGrid
from .scheme import (
    EnergyReport,
    SchemeParams,
    State,
    assemble_mass_matrix,
    assemble_momentum_matrix,
    energy_report,
    residual_mass,
    residual_momentum,
    stabilization,
    viscous_matrix,
)

__all__ = [
    "SolverConfig",
    "SolveReport",
    "SolverError",
    "solve_mass",
    "solve_zeta0",
    "picard_step",
    "solve",
]

LINEAR_SOLVERS = ("direct-sparse", "iterative")
COUPLINGS = ("density", "segregated")


class SolverError(RuntimeError):
    """Linear breakdown or non-finite iterate; ``state`` holds the last iterate."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class SolverConfig:
    """Continuation and iteration settings.

    A stage that fails from the warm start is retried from rest
    (``u = 0``, ``rho = rho_star``) when ``cold_restart`` is set.  Once the
    bisections of a step are exhausted, ``skip_failed_stages`` lets the
    continuation move on to the next scheduled value (from rest) instead of
    stopping; the last stage, zeta = 1, can never be skipped.

    ``coupling`` selects the velocity update: ``"density"`` solves the
    momentum equation together with the linearized response of the density
    (through the mass equation and the pressure law), ``"segregated"``
    freezes the density of the preceding mass solve.
    """

    zeta_schedule: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    picard_tol: float = 1e-9
    max_iters: int = 200
    relaxation: float = 0.7
    linear_solver: str = "direct-sparse"
    density_floor_warn: float = 1e-14
    coupling: str = "density"
    max_bisections: int = 6
    iterative_rtol: float = 1e-12
    cold_restart: bool = True
    skip_failed_stages: bool = True

    def __post_init__(self):
        z = tuple(float(v) for v in self.zeta_schedule)
        if len(z) < 2 or z[0] != 0.0 or z[-1] != 1.0 or np.any(np.diff(z) <= 0):
            raise ValueError("zeta schedule must increase strictly from 0 to 1")
        object.__setattr__(self, "zeta_schedule", z)
        if not 0 < self.picard_tol < 1:
            raise ValueError("picard_tol must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValueError(f"linear_solver must be one of {LINEAR_SOLVERS}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")


@dataclass
class StageRecord:
    zeta: float
    iterations: int = 0
    converged: bool = False
    mass_history: list = field(default_factory=list)
    momentum_history: list = field(default_factory=list)
    note: str = ""


@dataclass
class MassSolveLog:
    """Extremes over all mass solves of a run."""

    count: int = 0
    min_rho: float = np.inf
    max_mass_defect: float = 0.0
    below_floor: int = 0

    def record(self, rho: np.ndarray, g: MacGrid, mass: float, floor: float):
        self.count += 1
        self.min_rho = min(self.min_rho, float(rho.min()))
        self.max_mass_defect = max(self.max_mass_defect, abs(float(g.cell_volumes @ rho) - mass) / mass)
        if rho.min() < floor:
            self.below_floor += 1


@dataclass
class SolveReport:
    state: State
    converged: bool
    status: str
    stages: list
    residual_mass: float
    residual_momentum: float
    tolerance_mass: float
    tolerance_momentum: float
    diagnostics: dict
    energy: EnergyReport | None
    mass_log: MassSolveLog
    wallclock: float
    message: str = ""

    def to_text(self) -> str:
        out = [
            f"status: {self.status}",
            f"converged: {str(self.converged).lower()}",
            f"message: {self.message}",
            f"residual_mass: {self.residual_mass:.17g}",
            f"residual_momentum: {self.residual_momentum:.17g}",
            f"tolerance_mass: {self.tolerance_mass:.17g}",
            f"tolerance_momentum: {self.tolerance_momentum:.17g}",
            f"mass_solves: {self.mass_log.count}",
            f"mass_solves_min_rho: {self.mass_log.min_rho:.17g}",
            f"mass_solves_max_relative_mass_defect: {self.mass_log.max_mass_defect:.17g}",
            f"mass_solves_below_density_floor: {self.mass_log.below_floor}",
            f"wallclock_seconds: {self.wallclock:.6f}",
        ]
        for k, v in self.diagnostics.items():
            out.append(f"{k}: {v:.17g}")
        if self.energy is not None:
            e = self.energy
            out += [
                f"energy_kinetic_diffusion: {e.kinetic_diffusion:.17g}",
                f"energy_rhs_work: {e.rhs_work:.17g}",
                f"energy_stabilization_work: {e.stabilization_work:.17g}",
                f"energy_upwind_dissipation: {e.upwind_dissipation:.17g}",
                f"energy_identity_defect: {e.identity_defect:.17g}",
                f"energy_satisfied: {str(e.satisfied).lower()}",
                f"energy_is_solution: {str(e.is_solution).lower()}",
            ]
        out.append(f"stages: {len(self.stages)}")
        for s in self.stages:
            out.append(
                f"stage zeta={s.zeta:.17g} iterations={s.iterations} converged={str(s.converged).lower()}"
                + (f" note={s.note}" if s.note else "")
            )
            out.append("  mass_residuals: " + " ".join(f"{v:.6e}" for v in s.mass_history))
            out.append("  momentum_residuals: " + " ".join(f"{v:.6e}" for v in s.momentum_history))
        return "\n".join(out) + "\n"


def _linear_solve(A: sp.spmatrix, b: np.ndarray, config: SolverConfig) -> np.ndarray:
    A = sp.csc_matrix(A)
    if config.linear_solver == "direct-sparse":
        x = spla.spsolve(A, b)
    else:
        ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=30)
        M = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, M=M, rtol=config.iterative_rtol, atol=0.0, restart=200, maxiter=50)
        if info != 0:
            raise SolverError(f"iterative linear solve did not converge (info={info})")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    return x


def _with_mass_row(A: sp.spmatrix, b: np.ndarray, g: MacGrid, mass: float):
    """Swap the last mass row for the total mass constraint.

    The volume-weighted row sum of the mass system is the stabilization
    coefficient times the mass defect, so the swap leaves the solution
    unchanged.  Used when a tiny stabilization coefficient lets round-off
    pile up in the total mass.
    """
    A = sp.lil_matrix(A)
    b = np.array(b, dtype=float)
    n = g.n_cells - 1
    scale = A[n, n] / g.cell_volumes[n]
    A[n, :] = scale * g.cell_volumes
    b[n] = scale * mass
    return A.tocsc(), b


def solve_mass(u: VelocityField, params: SchemeParams, zeta: float = 1.0, config: SolverConfig | None = None,
               log: MassSolveLog | None = None) -> CellField:
    """Density solving the mass equation for a given velocity."""
    config = config or SolverConfig()
    g = u.grid
    A, b = assemble_mass_matrix(u, params, zeta)
    rho = _linear_solve(A, b, config)
    if abs(g.cell_volumes @ rho - params.mass) > 1e-13 * params.mass:
        rho = _linear_solve(*_with_mass_row(A, b, g, params.mass), config)
    if log is not None:
        log.record(rho, g, params.mass, config.density_floor_warn)
    return CellField(g, rho)


def solve_zeta0(g: MacGrid, params: SchemeParams, config: SolverConfig | None = None) -> State:
    """Closed-form density rho_star and the matching linear velocity solve."""
    config = config or SolverConfig()
    rho = CellField.constant(g, params.rho_star(g))
    b = params.forcing.dual_means(g, rho)
    u = _linear_solve(viscous_matrix(g, params), b, config)
    return State(VelocityField.from_flat(g, u), rho, params.gamma)


def _coupled_velocity(rho: CellField, u: VelocityField, params: SchemeParams, zeta: float,
                      config: SolverConfig) -> np.ndarray:
    """Velocity of the momentum equation solved jointly with the linearized
    density response.

    Unknowns are the velocity v and a density increment delta.  The momentum
    rows use frozen mass fluxes and the pressure rho^gamma linearized at rho;
    the mass rows linearize the upwind flux divergence at (rho, u) with the
    donor cells of u.
    """
    g = rho.grid
    A_m, b_m = assemble_momentum_matrix(rho, u, params, zeta)
    A_r, b_r = assemble_mass_matrix(u, params, zeta)
    G = op.grad_matrix(g)
    dp = params.gamma * rho.values ** (params.gamma - 1.0)
    C = zeta * (G @ sp.diags(dp))
    if params.forcing.density_dependent:
        C = C - params.forcing.density_matrix(g)
    B = zeta * op.upwind_matrix_u(g, rho, u)
    rhs_r = B @ u.flat() + (b_r - A_r @ rho.values)
    K = sp.bmat([[A_m, C], [B, A_r]], format="csc")
    x = _linear_solve(K, np.concatenate([b_m, rhs_r]), config)
    return x[: g.n_velocity]


def picard_step(s: State, params: SchemeParams, zeta: float, omega: float | None = None,
                config: SolverConfig | None = None, rho: CellField | None = None,
                log: MassSolveLog | None = None) -> State:
    """One fixed-point sweep.

    The density is obtained from the mass equation at the current velocity
    (``rho`` may be passed when already known), then a new velocity from the
    momentum equation, relaxed with ``omega``.  Returns the new velocity with
    the density of the sweep.
    """
    config = config or SolverConfig()
    omega = config.relaxation if omega is None else omega
    g = s.grid
    if rho is None:
        rho = solve_mass(s.u, params, zeta, config, log)
    if config.coupling == "segregated":
        A, b = assemble_momentum_matrix(rho, s.u, params, zeta)
        u_tmp = _linear_solve(A, b, config)
    else:
        u_tmp = _coupled_velocity(rho, s.u, params, zeta, config)
    u_new = (1.0 - omega) * s.u.flat() + omega * u_tmp
    if not np.all(np.isfinite(u_new)):
        raise SolverError("non-finite velocity iterate", state=s)
    return State(VelocityField.from_flat(g, u_new), rho, params.gamma)


def _tolerances(g: MacGrid, params: SchemeParams, rho: CellField, tol: float):
    t_mass = tol * (1.0 + stabilization(g, params) * params.rho_star(g))
    t_mom = tol * (1.0 + np.abs(params.forcing.dual_means(g, rho)).max(initial=0.0))
    return t_mass, t_mom


def _residuals(s: State, params: SchemeParams, zeta: float):
    rm = float(np.abs(residual_mass(s, params, zeta).values).max(initial=0.0))
    rmo = float(np.abs(residual_momentum(s, params, zeta).flat()).max(initial=0.0))
    return rm, rmo


def _continue(s: State, params: SchemeParams, zeta: float, config: SolverConfig, log: MassSolveLog):
    """Fixed-point iterations at one value of zeta, starting from ``s``."""
    g = s.grid
    rec = StageRecord(zeta)
    rho = solve_mass(s.u, params, zeta, config, log)
    cur = State(s.u, rho, params.gamma)
    first = None
    for it in range(config.max_iters + 1):
        rm, rmo = _residuals(cur, params, zeta)
        rec.mass_history.append(rm)
        rec.momentum_history.append(rmo)
        t_mass, t_mom = _tolerances(g, params, cur.rho, config.picard_tol)
        if rm <= t_mass and rmo <= t_mom:
            rec.iterations, rec.converged = it, True
            return cur, rec
        if first is None:
            first = max(rmo, t_mom)
        if not np.isfinite(rmo) or rmo > 1e8 * first:
            rec.iterations, rec.note = it, "diverged"
            return cur, rec
        hist = rec.momentum_history
        if it >= 16 and min(hist[-8:]) >= hist[0]:
            rec.iterations, rec.note = it, "not contracting"
            return cur, rec
        if it >= 25 and min(hist[-12:]) > 0.9 * min(hist[:-12]):
            rec.iterations, rec.note = it, "stalled"
            return cur, rec
        if it == config.max_iters:
            break
        try:
            nxt = picard_step(cur, params, zeta, config=config, rho=cur.rho, log=log)
            cur = State(nxt.u, solve_mass(nxt.u, params, zeta, config, log), params.gamma)
        except (SolverError, ValueError) as exc:
            rec.iterations, rec.note = it + 1, f"breakdown: {exc}"
            return cur, rec
    rec.iterations, rec.note = config.max_iters, "iteration limit"
    return cur, rec


def solution_diagnostics(s: State, params: SchemeParams) -> dict:
    g = s.grid
    u, rho = s.u, s.rho
    return {
        "u_h1_norm": op.h1_norm(u),
        "p_l2_norm": s.p.norm(2),
        "rho_l2gamma_norm": rho.norm(2 * params.gamma),
        "rho_min": float(rho.values.min()),
        "rho_max": float(rho.values.max()),
        "rho_integral": rho.integral(),
        "mass": params.mass,
        "weak_bv_beta2": op.weak_bv_sum(rho, u, 2.0),
        "weak_bv_beta_gamma": op.weak_bv_sum(rho, u, params.gamma),
        "stabilization_coefficient": stabilization(g, params),
    }


def _rest(g: MacGrid, params: SchemeParams) -> State:
    return State(VelocityField.zeros(g), CellField.constant(g, params.rho_star(g)), params.gamma)


def _start_residual(s: State, params: SchemeParams, zeta: float, config: SolverConfig) -> float:
    rho = solve_mass(s.u, params, zeta, config)
    return _residuals(State(s.u, rho, params.gamma), params, zeta)[1]


def _attempt(s: State, params: SchemeParams, zeta: float, config: SolverConfig, log: MassSolveLog, stages: list):
    """Iterate at ``zeta`` from the previous state or from rest.

    With ``cold_restart`` the start with the smaller momentum residual goes
    first and the other one is the fallback.
    """
    starts = [(s, "")]
    if config.cold_restart:
        rest = _rest(s.grid, params)
        if _start_residual(rest, params, zeta, config) < _start_residual(s, params, zeta, config):
            starts = [(rest, "cold start"), (s, "")]
        else:
            starts.append((rest, "cold start"))
    for start, label in starts:
        nxt, rec = _continue(start, params, zeta, config, log)
        rec.note = ", ".join(v for v in (label, rec.note) if v)
        stages.append(rec)
        if rec.converged:
            break
    return nxt, rec


def solve(g: MacGrid, params: SchemeParams, config: SolverConfig | None = None) -> SolveReport:
    """Continuation from zeta = 0 to 1 with adaptive bisection of failed steps.

    The report always comes back; ``converged`` tells whether the final
    residuals (recomputed on the returned state) meet the tolerance.
    """
    config = config or SolverConfig()
    params.check(g)
    t0 = time.perf_counter()
    log = MassSolveLog()
    s = solve_zeta0(g, params, config)
    log.record(s.rho.values, g, params.mass, config.density_floor_warn)
    rm, rmo = _residuals(s, params, 0.0)
    stages = [StageRecord(0.0, 1, True, [rm], [rmo])]
    accepted = 0.0
    scheduled = list(config.zeta_schedule[1:])
    targets = list(scheduled)
    bisections = 0
    failed = ""
    skipped = []
    while targets:
        z = targets[0]
        nxt, rec = _attempt(s, params, z, config, log, stages)
        if rec.converged:
            s, accepted = nxt, z
            targets.pop(0)
            if z == scheduled[0]:
                scheduled.pop(0)
                bisections = 0
            continue
        if bisections < config.max_bisections:
            bisections += 1
            targets.insert(0, 0.5 * (accepted + z))
            continue
        step = scheduled[0]
        if config.skip_failed_stages and step < 1.0:
            skipped.append(step)
            rec.note += "; skipped"
            scheduled.pop(0)
            targets = list(scheduled)
            bisections = 0
            s = _rest(g, params)
            continue
        failed = f"no convergence at zeta={z:.6g} after {bisections} bisections ({rec.note})"
        s = nxt
        break

    zeta_final = 1.0 if not failed else accepted
    rho = solve_mass(s.u, params, zeta_final, config, log)
    final = State(s.u, rho, params.gamma)
    rm, rmo = _residuals(final, params, zeta_final)
    t_mass, t_mom = _tolerances(g, params, rho, config.picard_tol)
    ok = not failed and rm <= t_mass and rmo <= t_mom
    if not failed and not ok:
        failed = "final residuals above tolerance"
    energy = energy_report(final, params) if zeta_final == 1.0 else None
    notes = [failed] if failed else []
    if skipped:
        notes.append("skipped zeta stages " + ",".join(f"{v:.6g}" for v in skipped))
    if log.below_floor:
        notes.append(f"density below floor in {log.below_floor} mass solves")
    return SolveReport(
        state=final,
        converged=ok,
        status="converged" if ok else "failed",
        stages=stages,
        residual_mass=rm,
        residual_momentum=rmo,
        tolerance_mass=t_mass,
        tolerance_momentum=t_mom,
        diagnostics=solution_diagnostics(final, params),
        energy=energy,
        mass_log=log,
        wallclock=time.perf_counter() - t0,
        message="; ".join(notes),
    )
