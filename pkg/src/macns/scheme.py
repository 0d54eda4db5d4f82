"""Nonlinear discrete system and its homotopy residuals.

With homotopy parameter ``zeta`` the mass and momentum residuals read::

    zeta div_up(rho u) + c (rho - rho_star)                              (mass)
    zeta div(rho u x u) + zeta grad(rho^gamma) - mu Lap u
        - (mu + lambda) grad div u - P_E f                               (momentum)

with ``c = C_s h^alpha``; ``zeta = 1`` is the scheme proper and ``zeta = 0``
a linear problem with constant density.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import operators as op
from .fields import AnalyticFunction, CellField, VelocityField, project_cells, project_faces_mean
from .grid import MacGrid, mesh_size, regularity

__all__ = [
    "Forcing",
    "SchemeParams",
    "State",
    "EnergyReport",
    "stabilization",
    "residual_mass",
    "residual_momentum",
    "assemble_mass_matrix",
    "assemble_momentum_matrix",
    "energy_report",
]

FORCE_KINDS = ("constant", "gravity", "rho-gravity", "mms", "file")


@dataclass(frozen=True)
class Forcing:
    """Momentum source.

    ``constant`` and ``gravity`` are uniform vectors; ``rho-gravity`` is
    the dual density times ``vector``; ``mms`` carries an analytic field in
    ``function``; ``file`` carries per-cell vector samples in ``cell_values``
    (shape (n_cells, d)), averaged over the dual cells.
    """

    kind: str = "constant"
    vector: tuple = ()
    function: AnalyticFunction | None = None
    cell_values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in FORCE_KINDS:
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if self.kind == "mms" and self.function is None:
            raise ValueError("mms forcing needs an analytic function")
        if self.kind == "file" and self.cell_values is None:
            raise ValueError("file forcing needs cell samples")

    @property
    def density_dependent(self) -> bool:
        return self.kind == "rho-gravity"

    def _vector(self, d: int) -> np.ndarray:
        v = np.zeros(d)
        vec = np.asarray(self.vector, dtype=float)
        if vec.size not in (0, d):
            raise ValueError(f"forcing vector has {vec.size} entries, expected {d}")
        v[: vec.size] = vec
        return v

    def density_matrix(self, g: MacGrid) -> sp.csr_matrix:
        """For rho-gravity: matrix mapping rho to P_E f (flat layout)."""
        g_vec = np.repeat(self._vector(g.dim), g.n_interior)
        return (sp.diags(g_vec) @ op.dual_density_matrix(g)).tocsr()

    def dual_means(self, g: MacGrid, rho: CellField | None = None) -> np.ndarray:
        """P_E f on the interior faces, flat layout."""
        key = ("forcing", id(self))
        if self.kind in ("constant", "gravity"):
            return np.repeat(self._vector(g.dim), g.n_interior)
        if self.kind == "rho-gravity":
            if rho is None:
                raise ValueError("rho-gravity forcing needs the density")
            return self.density_matrix(g) @ rho.values
        cached = g._cache.get(key)
        if cached is not None and cached[0] is self:
            return cached[1]
        if self.kind == "mms":
            out = project_faces_mean(self.function, g).flat()
        else:
            vals = np.asarray(self.cell_values, dtype=float)
            out = []
            for i, f in enumerate(g.faces):
                ids = f.interior_ids
                num = f.dual_lo[ids] * vals[f.lo_cell[ids], i] + f.dual_hi[ids] * vals[f.hi_cell[ids], i]
                out.append(num / f.dual_volume[ids])
            out = np.concatenate(out)
        g._cache[key] = (self, out)
        return out


@dataclass(frozen=True)
class SchemeParams:
    """Physical and numerical constants.

    ``cs = None`` selects the default stabilization constant (see
    :func:`stabilization`).  ``mass_source`` is an optional analytic source
    added to the right side of the mass equation; it is only meant for
    manufactured solutions and is off unless given.
    """

    gamma: float = 1.4
    mu: float = 0.1
    lam: float = 0.0
    mass: float = 1.0
    cs: float | None = None
    alpha: float = 2.0
    forcing: Forcing = field(default_factory=Forcing)
    mass_source: AnalyticFunction | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"viscosity mu must be positive, got {self.mu}")
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.cs is not None and not self.cs > 0:
            raise ValueError(f"stabilization constant must be positive, got {self.cs}")
        if not self.alpha > 1:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")

    def check(self, g: MacGrid) -> None:
        """Checks that depend on the dimension."""
        d = g.dim
        if self.lam + 2.0 * self.mu / d < 0:
            raise ValueError(f"viscosities violate lambda + 2 mu / d >= 0 (lambda={self.lam}, mu={self.mu}, d={d})")
        if d == 3 and self.gamma <= 3:
            warnings.warn("in 3D the convergence theory assumes gamma > 3", stacklevel=2)

    def rho_star(self, g: MacGrid) -> float:
        return self.mass / g.volume


def default_cs(g: MacGrid, params: SchemeParams) -> float:
    """min(1, 0.9 * mu eta^6 / (M diam^(alpha-1)))."""
    eta = regularity(g)
    bound = params.mu * eta**6 / (params.mass * g.spec.diameter() ** (params.alpha - 1))
    return min(1.0, 0.9 * bound)


def stabilization(g: MacGrid, params: SchemeParams) -> float:
    """The coefficient C_s h^alpha of the mass stabilization term."""
    cs = default_cs(g, params) if params.cs is None else params.cs
    return cs * mesh_size(g) ** params.alpha


def mass_source_means(g: MacGrid, params: SchemeParams) -> np.ndarray:
    if params.mass_source is None:
        return np.zeros(g.n_cells)
    key = ("mass_source", id(params.mass_source))
    cached = g._cache.get(key)
    if cached is None or cached[0] is not params.mass_source:
        cached = (params.mass_source, project_cells(params.mass_source, g).values)
        g._cache[key] = cached
    return cached[1]


@dataclass(frozen=True, eq=False)
class State:
    """Velocity and density; the pressure is always recomputed."""

    u: VelocityField
    rho: CellField
    gamma: float

    @property
    def grid(self) -> MacGrid:
        return self.rho.grid

    @property
    def p(self) -> CellField:
        return CellField(self.grid, self.rho.values**self.gamma)


def residual_mass(s: State, params: SchemeParams, zeta: float = 1.0) -> CellField:
    g = s.grid
    c = stabilization(g, params)
    r = zeta * op.div_upwind(s.rho, s.u).values + c * (s.rho.values - params.rho_star(g))
    return CellField(g, r - mass_source_means(g, params))


def residual_momentum(s: State, params: SchemeParams, zeta: float = 1.0) -> VelocityField:
    g = s.grid
    u = s.u
    r = (
        zeta * op.convective_div(s.rho, u).flat()
        + zeta * op.grad_faces(s.p).flat()
        + params.mu * op.laplacian_faces(u).flat()
        - (params.mu + params.lam) * op.grad_faces(op.div_cells(u)).flat()
        - params.forcing.dual_means(g, s.rho)
    )
    return VelocityField.from_flat(g, r)


def assemble_mass_matrix(u: VelocityField, params: SchemeParams, zeta: float = 1.0):
    """Matrix A and right side b with A rho = b equivalent to a zero mass residual.

    A has a positive diagonal and nonpositive off-diagonal entries.
    """
    g = u.grid
    c = stabilization(g, params)
    A = zeta * op.upwind_matrix_rho(g, u) + c * sp.identity(g.n_cells, format="csr")
    b = np.full(g.n_cells, c * params.rho_star(g)) + mass_source_means(g, params)
    return A.tocsr(), b


def viscous_matrix(g: MacGrid, params: SchemeParams) -> sp.csr_matrix:
    """-mu Lap - (mu + lambda) grad div, flat layout."""
    key = ("viscous", params.mu, params.lam)
    if key not in g._cache:
        A = params.mu * op.laplacian_faces_matrix(g) - (params.mu + params.lam) * (op.grad_matrix(g) @ op.div_matrix(g))
        g._cache[key] = A.tocsr()
    return g._cache[key]


def assemble_momentum_matrix(rho: CellField, u_frozen: VelocityField, params: SchemeParams, zeta: float = 1.0):
    """Oseen linearization: mass fluxes frozen at (rho, u_frozen), pressure
    zeta rho^gamma and forcing moved to the right side."""
    g = rho.grid
    A = viscous_matrix(g, params)
    if zeta != 0.0:
        A = A + zeta * op.convection_matrix(g, op.mass_fluxes(rho, u_frozen))
    b = params.forcing.dual_means(g, rho) - zeta * (op.grad_matrix(g) @ rho.values**params.gamma)
    return A.tocsr(), b


@dataclass(frozen=True)
class EnergyReport:
    """Energy balance of a state at zeta = 1.

    ``kinetic_diffusion`` is mu |u|_1^2 + (mu + lambda) |div u|^2,
    ``rhs_work`` the forcing work, ``stabilization_work`` the contribution of
    the stabilization terms and ``upwind_dissipation`` the nonnegative
    numerical dissipation of the upwind fluxes.  For an exact solution

        kinetic_diffusion = rhs_work + stabilization_work - upwind_dissipation,

    ``identity_defect`` is the difference of the two sides.  ``is_solution``
    is False when the residuals of the state exceed ``solution_tol``, in
    which case ``satisfied`` carries no meaning.
    """

    kinetic_diffusion: float
    rhs_work: float
    stabilization_work: float
    upwind_dissipation: float
    identity_defect: float
    tol: float
    satisfied: bool
    is_solution: bool

    @property
    def scale(self) -> float:
        return abs(self.kinetic_diffusion) + abs(self.rhs_work) + abs(self.stabilization_work) + abs(self.upwind_dissipation)


def _entropy(rho, gamma):
    return rho**gamma / (gamma - 1.0)


def _entropy_prime(rho, gamma):
    return gamma * rho ** (gamma - 1.0) / (gamma - 1.0)


def upwind_dissipation(rho: CellField, u: VelocityField, gamma: float) -> float:
    g = u.grid
    tot = 0.0
    for i, f in enumerate(g.faces):
        ids = f.interior_ids
        ui = u[i].values[ids]
        rk, rl = rho.values[f.lo_cell[ids]], rho.values[f.hi_cell[ids]]
        up = np.where(ui >= 0, rk, rl)
        dn = np.where(ui >= 0, rl, rk)
        gap = _entropy(up, gamma) - _entropy(dn, gamma) - _entropy_prime(dn, gamma) * (up - dn)
        tot += float(np.sum(f.measure[ids] * np.abs(ui) * gap))
    return tot


def stabilization_work(s: State, params: SchemeParams) -> float:
    g = s.grid
    c = stabilization(g, params)
    rs = params.rho_star(g)
    r = s.rho.values
    pressure_part = -c * float(np.sum(g.cell_volumes * _entropy_prime(r, params.gamma) * (r - rs)))
    kinetic_part = 0.0
    for i, rd in enumerate(op.dual_density(s.rho)):
        f = g.faces[i]
        kinetic_part += 0.5 * c * float(np.sum(f.dual_volume * (rd.values - rs) * s.u[i].values ** 2))
    return pressure_part + kinetic_part


def energy_report(s: State, params: SchemeParams, tol: float = 1e-8, solution_tol: float = 1e-6) -> EnergyReport:
    """Compare the viscous energy of ``s`` with the work of the data.

    ``satisfied`` means kinetic_diffusion <= rhs_work + stabilization_work +
    tol * scale.
    """
    g = s.grid
    u = s.u
    kd = params.mu * op.h1_inner(u, u) + (params.mu + params.lam) * op.div_cells(u).dot(op.div_cells(u))
    work = float(params.forcing.dual_means(g, s.rho) @ (dual_volume_weights(g) * u.flat()))
    stab = stabilization_work(s, params)
    R = upwind_dissipation(s.rho, u, params.gamma)
    rm = np.abs(residual_mass(s, params).values).max(initial=0.0)
    rmo = np.abs(residual_momentum(s, params).flat()).max(initial=0.0)
    scale_rhs = 1.0 + np.abs(params.forcing.dual_means(g, s.rho)).max(initial=0.0)
    is_sol = bool(rm <= solution_tol * (1.0 + stabilization(g, params) * params.rho_star(g)) and rmo <= solution_tol * scale_rhs)
    rep = EnergyReport(kd, work, stab, R, kd - (work + stab - R), tol, False, is_sol)
    sat = kd <= work + stab + tol * max(rep.scale, np.finfo(float).tiny)
    return EnergyReport(kd, work, stab, R, kd - (work + stab - R), tol, bool(sat), is_sol)


def dual_volume_weights(g: MacGrid) -> np.ndarray:
    return op.dual_volumes_flat(g)
