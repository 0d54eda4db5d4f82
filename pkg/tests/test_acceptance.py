"""The ten acceptance criteria at their stated tolerances.

Each test records a one-line PASS/FAIL verdict (shown in the terminal
summary) before asserting.
"""
import numpy as np
import pytest

from conftest import ACCEPTANCE, random_velocity
from macns import operators as op
from macns.diagnostics import (
    StabilityTable,
    _random_bump,
    default_grid_family,
    density_lower_bound,
    diamond_mass_defect,
    is_box_grid,
    run_convergence_study,
)
from macns.fields import CellField, fortin_interpolate, project_cells
from macns.grid import DomainSpec, build_grid, l_shape, uniform_square
from macns.scheme import Forcing, SchemeParams, residual_momentum
from macns.solver import SolverConfig, solve, solve_mass, solve_zeta0

GRAVITY = SchemeParams(gamma=1.4, mu=0.1, lam=0.0, mass=1.0, forcing=Forcing("constant", (0.0, -1.0)))
GRAVITY_3D = SchemeParams(gamma=3.5, mu=0.1, lam=0.0, mass=1.0, forcing=Forcing("constant", (0.0, 0.0, -1.0)))
FAST = SolverConfig(zeta_schedule=(0.0, 0.5, 1.0))


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


@pytest.fixture(scope="module")
def family():
    fam = default_grid_family()
    assert len(fam) >= 6
    assert any(not is_box_grid(g) for g in fam if g.dim == 2)
    assert any(np.ptp(g.cell_sizes) > 0 for g in fam)
    assert {g.dim for g in fam} == {2, 3}
    return fam


@pytest.fixture(scope="module")
def gravity():
    # default schedule on 16^2; shorter schedules elsewhere to bound runtime
    return {
        8: solve(uniform_square(8), GRAVITY, FAST),
        16: solve(uniform_square(16), GRAVITY),
        32: solve(uniform_square(32), GRAVITY, FAST),
    }


@pytest.fixture(scope="module")
def smoke3d():
    return solve(uniform_square(8, 3), GRAVITY_3D)


def test_criterion_01_duality(family):
    rng = np.random.default_rng(101)
    worst = 0.0
    for g in family:
        for _ in range(50):
            q = CellField(g, rng.uniform(-1, 1, g.n_cells))
            v = random_velocity(g, rng)
            defect = abs(q.dot(op.div_cells(v)) + op.grad_faces(q).dot(v))
            worst = max(worst, defect / (1.0 + q.norm(2) * v.norm(2)))
    ok = worst <= 1e-12
    record(1, ok, f"max |<q,div v> + <grad q,v>| / (1+|q||v|) = {worst:.3e} <= 1e-12 on {len(family)} grids")
    assert ok


def test_criterion_02_hodge(family):
    rng = np.random.default_rng(102)
    worst = 0.0
    for g in family:
        for _ in range(50):
            v, w = random_velocity(g, rng), random_velocity(g, rng)
            lhs = op.grad_full(v).inner(op.grad_full(w))
            rhs = op.div_cells(v).dot(op.div_cells(w)) + op.curl_faces(v).inner(op.curl_faces(w))
            worst = max(worst, abs(lhs - rhs) / (op.h1_norm(v) * op.h1_norm(w)))
    ok = worst <= 1e-11
    record(2, ok, f"max relative Hodge defect = {worst:.3e} <= 1e-11 on {len(family)} grids (2D and 3D)")
    assert ok


def test_criterion_03_divcurl(family):
    rng = np.random.default_rng(103)
    div_worst, curl_box, curl_other = 0.0, 0.0, 0.0
    for g in family:
        for _ in range(20):
            rho = CellField(g, rng.uniform(-1, 1, g.n_cells))
            v = -op.grad_faces_ext(op.solve_primal_poisson(rho))
            div_worst = max(div_worst, np.abs(op.div_cells(v).values - rho.values).max() / rho.norm(np.inf))
            c = op.curl_faces(v).max_abs() / v.norm(np.inf)
            if is_box_grid(g):
                curl_box = max(curl_box, c)
            else:
                curl_other = max(curl_other, c)
    ok_div = div_worst <= 1e-10
    ok_curl = max(curl_box, curl_other) <= 1e-12
    record(3, ok_div and ok_curl,
           f"div defect {div_worst:.3e} <= 1e-10; relative curl {curl_box:.3e} on box grids, "
           f"{curl_other:.3e} on grids with reentrant corners (limit 1e-12)")
    assert ok_div
    assert ok_curl, "curl of the extended gradient is not zero at reentrant corners"


def test_criterion_04_fortin(family):
    rng = np.random.default_rng(104)
    worst = 0.0
    for g in family:
        for _ in range(10):
            phi, div_phi = _random_bump(g, rng)
            assert phi.order == div_phi.order == 5
            lhs = op.div_cells(fortin_interpolate(phi, g)).values
            rhs = project_cells(div_phi, g).values
            worst = max(worst, np.abs(lhs - rhs).max())
    ok = worst <= 1e-9
    record(4, ok, f"max |div P~ phi - P div phi| = {worst:.3e} <= 1e-9 (order-5 quadrature)")
    assert ok


def test_criterion_05_mass_and_positivity(gravity, smoke3d):
    ok = True
    min_rho, defect, solves = np.inf, 0.0, 0
    for rep in list(gravity.values()) + [smoke3d]:
        ok &= rep.converged
        log = rep.mass_log
        min_rho, defect, solves = min(min_rho, log.min_rho), max(defect, log.max_mass_defect), solves + log.count
        s = rep.state
        defect = max(defect, abs(s.rho.integral() - 1.0))
        min_rho = min(min_rho, s.rho.values.min())
    rng = np.random.default_rng(105)
    bound_ok = True
    grids = [uniform_square(8), l_shape(4), uniform_square(4, 3)]
    for k in range(20):
        g = grids[k % len(grids)]
        u = random_velocity(g, rng, float(rng.uniform(0.1, 20.0)))
        zeta = float(rng.uniform(0.0, 1.0))
        rho = solve_mass(u, GRAVITY, zeta)
        bound_ok &= bool(np.all(rho.values >= density_lower_bound(u, GRAVITY, zeta)))
        min_rho = min(min_rho, rho.values.min())
        defect = max(defect, abs(rho.integral() - 1.0))
    ok = ok and min_rho > 0 and defect <= 1e-12 and bound_ok
    record(5, ok, f"{solves} Picard mass solves + 20 random: min rho {min_rho:.4e} > 0, "
                  f"max |int rho - M|/M {defect:.2e} <= 1e-12, lower bound holds: {bound_ok}")
    assert ok


def test_criterion_06_zeta0():
    cases = [
        (uniform_square(16), GRAVITY),
        (l_shape(4), SchemeParams(lam=0.05, mass=2.0, forcing=Forcing("constant", (1.0, -1.0)))),
        (uniform_square(4, 3), GRAVITY_3D),
    ]
    worst, exact = 0.0, True
    for g, p in cases:
        s = solve_zeta0(g, p)
        exact &= bool(np.all(s.rho.values == p.rho_star(g)))
        worst = max(worst, np.abs(residual_momentum(s, p, 0.0).flat()).max())
    ok = exact and worst <= 1e-12
    record(6, ok, f"rho == rho_star exactly: {exact}; momentum residual {worst:.3e} <= 1e-12")
    assert ok


def test_criterion_07_energy(gravity):
    parts = []
    ok = True
    for n in (16, 32):
        rep = gravity[n]
        e = rep.energy
        ok &= rep.converged and e is not None and e.is_solution and e.satisfied
        margin = e.rhs_work + e.stabilization_work - e.kinetic_diffusion
        parts.append(f"{n}^2: work+stab-diffusion = {margin:.3e} (tol 1e-8*{e.scale:.3e})")
    record(7, ok, "; ".join(parts))
    assert ok


def test_criterion_08_diamond(gravity, smoke3d):
    worst = 0.0
    for rep in list(gravity.values()) + [smoke3d]:
        assert rep.converged
        worst = max(worst, max(diamond_mass_defect(rep.state, rep_params(rep))))
    ok = worst <= 1e-11
    record(8, ok, f"max relative dual-cell mass defect over 4 converged states = {worst:.3e} <= 1e-11")
    assert ok


def rep_params(rep):
    return GRAVITY_3D if rep.state.grid.dim == 3 else GRAVITY


def test_criterion_09_stability(gravity):
    keys = ("u_h1_norm", "p_l2_norm", "rho_l2gamma_norm", "weak_bv_beta2")
    rows = []
    for n in (8, 16, 32):
        assert gravity[n].converged
        d = gravity[n].diagnostics
        rows.append({"h": 1.0 / n, **{k: d[k] for k in keys}})
    var = {k: abs(rows[-1][k] / rows[-2][k] - 1.0) for k in keys}
    table = StabilityTable([dict(r, weak_bv_beta_gamma=0.0, sobolev_ratio=0.0) for r in rows], [])
    ok = all(v < 0.1 for v in var.values())
    record(9, ok, "variation 16^2 -> 32^2: " + ", ".join(f"{k} {var[k]:.1%}" for k in keys)
           + f" (< 10%); no growth beyond 10%: {table.bounded}")
    assert ok


def test_criterion_10_convergence(smoke3d):
    study = run_convergence_study(DomainSpec.unit_box(2), 3, GRAVITY, FAST, base=8)
    dec_u, dec_rho = study.strictly_decreasing("err_u_l2"), study.strictly_decreasing("err_rho_l2")
    rep = smoke3d
    e = rep.energy
    s3 = rep.state
    smoke_ok = (
        rep.converged
        and s3.rho.values.min() > 0
        and rep.mass_log.min_rho > 0
        and max(rep.mass_log.max_mass_defect, abs(s3.rho.integral() - 1.0)) <= 1e-12
        and e.satisfied
        and max(diamond_mass_defect(s3, GRAVITY_3D)) <= 1e-11
    )
    ok = study.complete and len(study.rows) == 3 and dec_u and dec_rho and smoke_ok
    record(10, ok, "u L2 errors " + " ".join(f"{v:.3e}" for v in study.column("err_u_l2"))
           + "; rho L2 errors " + " ".join(f"{v:.3e}" for v in study.column("err_rho_l2"))
           + f"; 3D 8^3 gamma=3.5 converged with criteria 5,7,8: {smoke_ok}")
    assert ok
