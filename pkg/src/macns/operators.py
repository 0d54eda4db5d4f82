"""Discrete differential operators on MAC grids.

Every operator comes as a matrix-free function working on dense lattice
arrays and, for the ones the solver needs, as an assembled sparse matrix in
the flat velocity layout (interior faces of direction 1, then 2, then 3).
The two routes are written independently so each can check the other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _lattice as lat
from .fields import CellField, FaceField, VelocityField
from .grid import MacGrid

__all__ = [
    "MassFluxes",
    "DualFluxes",
    "BoxField",
    "div_cells",
    "grad_faces",
    "grad_faces_ext",
    "laplacian_faces",
    "laplacian_cells",
    "solve_primal_poisson",
    "curl_faces",
    "grad_full",
    "h1_inner",
    "h1_norm",
    "mass_fluxes",
    "div_upwind",
    "dual_fluxes",
    "dual_density",
    "convective_div",
    "weak_bv_sum",
    "effective_viscous_flux",
    "write_coo",
]


# ----------------------------------------------------------------------
# dense helpers

def _take(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _pad(a, axis):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    return np.pad(a, pad)


def _pdiff(a, axis):
    """y[k] = a[k] - a[k-1] with zeros outside; one more entry along axis."""
    return np.diff(_pad(a, axis), axis=axis)


def _pavg(a, axis):
    p = _pad(a, axis)
    n = p.shape[axis]
    return 0.5 * (_take(p, axis, 1, n) + _take(p, axis, 0, n - 1))


def _avg(a, axis):
    n = a.shape[axis]
    return 0.5 * (_take(a, axis, 1, n) + _take(a, axis, 0, n - 1))


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros(np.broadcast(a, b).shape), where=b != 0)


class _Geometry:
    """Dense geometric coefficients shared by the operators."""

    def __init__(self, g: MacGrid):
        d = g.dim
        self.vol = g.dense_volume
        self.act = g.active
        self.h = [g.width_view(i) for i in range(d)]
        self.dface = [f.distance for f in g.faces]
        self.area = [np.where(f.exists, f.area, 0.0) for f in g.faces]
        self.dvol = [a * df for a, df in zip(self.area, self.dface)]
        self.exists = [f.exists for f in g.faces]
        self.interior = [f.interior for f in g.faces]
        # transmissibilities |eps|/d_eps and normal extents of the dual faces
        self.trans = [[None] * d for _ in range(d)]
        self.dnorm = [[None] * d for _ in range(d)]
        for i in range(d):
            self.trans[i][i] = self.vol / self.h[i] ** 2
            self.dnorm[i][i] = np.where(self.act, self.h[i], 0.0)
            for j in range(d):
                if j == i:
                    continue
                e = g.edge(i, j)
                ext_i = g.edge_extent(i, j, i)
                ext_j = g.edge_extent(i, j, j)
                self.trans[i][j] = np.where(e.exists, _safe_div(ext_i * e.other, ext_j), 0.0)
                self.dnorm[i][j] = np.where(e.exists, ext_j, 0.0)


def geometry(g: MacGrid) -> _Geometry:
    if "geo" not in g._cache:
        g._cache["geo"] = _Geometry(g)
    return g._cache["geo"]


# ----------------------------------------------------------------------
# result containers

@dataclass(frozen=True, eq=False)
class MassFluxes:
    """Upwind mass fluxes, one signed value per face (positive along +e_i).

    The flux leaving cell K through a face is this value for the face on the
    high side of K and its negative on the low side, so the antisymmetry
    between the two cells of a face holds by construction.
    """

    grid: MacGrid
    values: tuple

    def dense(self, i: int) -> np.ndarray:
        return self.grid.faces_to_dense(i, self.values[i])

    def outward(self) -> np.ndarray:
        """Array (n_cells, 2d): K-outward fluxes through the low and high
        face of each direction, ordered (dir 1 low, dir 1 high, dir 2 low, ...)."""
        g = self.grid
        cols = []
        for i in range(g.dim):
            cf = g.cell_faces[i]
            cols += [-self.values[i][cf[:, 0]], self.values[i][cf[:, 1]]]
        return np.stack(cols, axis=1)


@dataclass(frozen=True, eq=False)
class DualFluxes:
    """Mass fluxes through the dual faces of the direction-``direction`` mesh.

    ``normal[j]`` is a dense array of fluxes along +e_j: on the cell lattice
    for ``j == direction``, on the edge lattice of the pair otherwise.
    """

    grid: MacGrid
    direction: int
    normal: tuple

    def balance(self) -> np.ndarray:
        """Sum of D_sigma-outward fluxes, per face of the direction."""
        i = self.direction
        tot = 0.0
        for j, phi in enumerate(self.normal):
            tot = tot + (_pdiff(phi, i) if j == i else np.diff(phi, axis=j))
        return self.grid.dense_to_faces(i, tot)

    def outward(self) -> np.ndarray:
        """Array (n_faces, 2d): outward fluxes through the lower and upper dual
        face along each axis, ordered (axis 1 lower, axis 1 upper, ...)."""
        i = self.direction
        cols = []
        for j, phi in enumerate(self.normal):
            if j == i:
                p = _pad(phi, i)
                n = p.shape[i]
                low, up = _take(p, i, 0, n - 1), _take(p, i, 1, n)
            else:
                n = phi.shape[j]
                low, up = _take(phi, j, 0, n - 1), _take(phi, j, 1, n)
            cols += [-self.grid.dense_to_faces(i, low), self.grid.dense_to_faces(i, up)]
        return np.stack(cols, axis=1)


@dataclass(frozen=True, eq=False)
class BoxField:
    """Piecewise constant values on a family of boxes.

    ``parts`` maps a key to ``(values, measure)`` dense arrays of equal
    shape; entries with zero measure are not boxes.
    """

    grid: MacGrid
    parts: dict

    def inner(self, other: "BoxField") -> float:
        return float(sum(np.sum(m * v * other.parts[k][0]) for k, (v, m) in self.parts.items()))

    def max_abs(self) -> float:
        return float(max(np.abs(np.where(m > 0, v, 0.0)).max(initial=0.0) for v, m in self.parts.values()))

    def __getitem__(self, key):
        return self.parts[key][0]


# ----------------------------------------------------------------------
# matrix-free operators

def _check_velocity(u: VelocityField):
    if not u.zero_on_boundary:
        raise ValueError("operator needs a velocity vanishing on exterior faces")


def div_cells(u: VelocityField) -> CellField:
    """Cell divergence of face values (any face field, boundary values included)."""
    g = u.grid
    geo = geometry(g)
    div = sum(np.diff(u[i].dense(), axis=i) / geo.h[i] for i in range(g.dim))
    return CellField(g, g.dense_to_cells(div))


def grad_faces(p: CellField) -> VelocityField:
    """Face gradient of a cell field, zero on exterior faces."""
    g = p.grid
    geo = geometry(g)
    pd = p.dense()
    out = []
    for i in range(g.dim):
        gi = np.where(geo.interior[i], _safe_div(_pdiff(pd, i), geo.dface[i]), 0.0)
        out.append(g.dense_to_faces(i, gi))
    return VelocityField.from_arrays(g, out)


def grad_faces_ext(w: CellField) -> VelocityField:
    """Face gradient with homogeneous Dirichlet data on exterior faces."""
    g = w.grid
    geo = geometry(g)
    wd = w.dense()
    out = [g.dense_to_faces(i, _safe_div(_pdiff(wd, i), geo.dface[i])) for i in range(g.dim)]
    return VelocityField.from_arrays(g, out, zero_on_boundary=False)


def laplacian_cells(w: CellField) -> CellField:
    """Two-point flux Laplacian (negative sign convention) with zero Dirichlet data."""
    g = w.grid
    geo = geometry(g)
    wd = w.dense()
    acc = np.zeros(g.shape)
    for i in range(g.dim):
        flux = _safe_div(geo.area[i], geo.dface[i]) * _pdiff(wd, i)
        acc -= np.diff(flux, axis=i)
    return CellField(g, g.dense_to_cells(acc) / g.cell_volumes)


def _face_differences(ui: np.ndarray, i: int, j: int) -> np.ndarray:
    """Differences of a direction-i face array across the dual faces normal to e_j."""
    return np.diff(ui, axis=i) if j == i else _pdiff(ui, j)


def laplacian_faces(u: VelocityField) -> VelocityField:
    """Dual-mesh Laplacian (negative sign convention) of each component."""
    _check_velocity(u)
    g = u.grid
    geo = geometry(g)
    out = []
    for i in range(g.dim):
        ui = u[i].dense()
        acc = np.zeros(ui.shape)
        for j in range(g.dim):
            flux = geo.trans[i][j] * _face_differences(ui, i, j)
            acc -= _pdiff(flux, i) if j == i else np.diff(flux, axis=j)
        acc = np.where(geo.interior[i], _safe_div(acc, geo.dvol[i]), 0.0)
        out.append(g.dense_to_faces(i, acc))
    return VelocityField.from_arrays(g, out)


def grad_full(u: VelocityField) -> BoxField:
    """All partial derivatives of all components on their boxes.

    Key ``(i, j)`` holds the derivative of component ``i`` along axis ``j``:
    on the cells for ``i == j``, on the edge boxes of the pair otherwise.
    Exterior face values are used as given, so the same routine serves
    fields that do not vanish on the boundary.
    """
    g = u.grid
    geo = geometry(g)
    parts = {}
    for i in range(g.dim):
        ui = u[i].dense()
        for j in range(g.dim):
            dn = geo.dnorm[i][j]
            val = _safe_div(_face_differences(ui, i, j), dn)
            meas = geo.vol if i == j else g.edge(i, j).measure * (dn > 0)
            parts[(i, j)] = (val, meas)
    return BoxField(g, parts)


def curl_faces(v: VelocityField) -> BoxField:
    """Discrete curl on the edge boxes.

    2D: one scalar part keyed 0.  3D: parts 0, 1, 2 for the usual components
    (derivative pairs (2,3), (3,1), (1,2)).
    """
    g = v.grid
    G = grad_full(v)

    def comp(a, b):  # d_a v_b - d_b v_a
        val = G.parts[(b, a)][0] - G.parts[(a, b)][0]
        return val, G.parts[(a, b)][1]

    if g.dim == 2:
        return BoxField(g, {0: comp(0, 1)})
    return BoxField(g, {0: comp(1, 2), 1: comp(2, 0), 2: comp(0, 1)})


def h1_inner(u: VelocityField, v: VelocityField) -> float:
    """Broken H1 inner product, summed over dual faces with weights |eps|/d_eps."""
    _check_velocity(u)
    _check_velocity(v)
    g = u.grid
    geo = geometry(g)
    tot = 0.0
    for i in range(g.dim):
        ui, vi = u[i].dense(), v[i].dense()
        for j in range(g.dim):
            tot += float(np.sum(geo.trans[i][j] * _face_differences(ui, i, j) * _face_differences(vi, i, j)))
    return tot


def h1_norm(u: VelocityField) -> float:
    return float(np.sqrt(max(h1_inner(u, u), 0.0)))


def _upwind_density(g: MacGrid, rd: np.ndarray, ud: np.ndarray, i: int) -> np.ndarray:
    p = _pad(rd, i)
    n = p.shape[i]
    lo, hi = _take(p, i, 0, n - 1), _take(p, i, 1, n)
    return np.where(ud >= 0.0, lo, hi)


def mass_fluxes(rho: CellField, u: VelocityField) -> MassFluxes:
    """Upwind mass fluxes |sigma| rho_up u_sigma on interior faces."""
    _check_velocity(u)
    g = u.grid
    geo = geometry(g)
    rd = rho.dense()
    vals = []
    for i in range(g.dim):
        ud = u[i].dense()
        F = np.where(geo.interior[i], geo.area[i] * _upwind_density(g, rd, ud, i) * ud, 0.0)
        vals.append(g.dense_to_faces(i, F))
    return MassFluxes(g, tuple(vals))


def div_upwind(rho: CellField, u: VelocityField) -> CellField:
    F = mass_fluxes(rho, u)
    g = u.grid
    acc = sum(np.diff(F.dense(i), axis=i) for i in range(g.dim))
    return CellField(g, g.dense_to_cells(acc) / g.cell_volumes)


def dual_fluxes(F: MassFluxes, i: int) -> DualFluxes:
    """Fluxes through the dual faces of the direction-i mesh.

    Inside a cell the flux is the mean of the direction-i fluxes of the cell's
    two faces; across a tangential dual face it is the mean of the fluxes
    through the two primal faces it straddles.
    """
    g = F.grid
    normal = []
    for j in range(g.dim):
        Fj = F.dense(j)
        if j == i:
            normal.append(np.where(g.active, _avg(Fj, i), 0.0))
        else:
            normal.append(np.where(g.edge(i, j).exists, _pavg(Fj, i), 0.0))
    return DualFluxes(g, i, tuple(normal))


def dual_density(rho: CellField) -> tuple:
    """Density on the dual cells, one face field per direction (exterior faces
    carry the density of their only cell)."""
    g = rho.grid
    geo = geometry(g)
    rd = rho.dense()
    out = []
    for i, f in enumerate(g.faces):
        p = _pad(rd, i)
        n = p.shape[i]
        lo, hi = _take(p, i, 0, n - 1), _take(p, i, 1, n)
        val = _safe_div(f.half_lo * lo + f.half_hi * hi, geo.dface[i])
        out.append(FaceField(g, i, g.dense_to_faces(i, val), zero_on_boundary=False))
    return tuple(out)


def convective_div(rho: CellField, u: VelocityField, fluxes: MassFluxes | None = None) -> VelocityField:
    """Dual-cell divergence of the momentum flux with centered face velocities.

    ``fluxes`` may be given to freeze the mass fluxes (the velocity entering
    the centered values is always ``u``).
    """
    _check_velocity(u)
    g = u.grid
    geo = geometry(g)
    F = mass_fluxes(rho, u) if fluxes is None else fluxes
    out = []
    for i in range(g.dim):
        D = dual_fluxes(F, i)
        ui = u[i].dense()
        acc = np.zeros(ui.shape)
        for j, phi in enumerate(D.normal):
            if j == i:
                acc += _pdiff(phi * _avg(ui, i), i)
            else:
                acc += np.diff(phi * _pavg(ui, j), axis=j)
        acc = np.where(geo.interior[i], _safe_div(acc, geo.dvol[i]), 0.0)
        out.append(g.dense_to_faces(i, acc))
    return VelocityField.from_arrays(g, out)


def weak_bv_sum(rho: CellField, u: VelocityField, beta: float) -> float:
    """Sum over interior faces of |sigma| rho_{sigma,beta} |u_sigma| [rho]^2."""
    if beta < 1:
        raise ValueError("beta must be at least 1")
    g = u.grid
    if beta < 2 and np.any(rho.values <= 0):
        raise ValueError("density must be positive for beta < 2")
    tot = 0.0
    for i, f in enumerate(g.faces):
        ids = f.interior_ids
        rk, rl = rho.values[f.lo_cell[ids]], rho.values[f.hi_cell[ids]]
        if beta == 2:
            w = np.ones(ids.size)
        else:
            w = np.minimum(rk ** (beta - 2), rl ** (beta - 2))
        tot += float(np.sum(f.measure[ids] * w * np.abs(u[i].values[ids]) * (rl - rk) ** 2))
    return tot


def effective_viscous_flux(p: CellField, u: VelocityField, mu: float, lam: float) -> CellField:
    return p - (2.0 * mu + lam) * div_cells(u)


# ----------------------------------------------------------------------
# assembled matrices (flat velocity layout)

def _cached(g: MacGrid, key, build):
    if key not in g._cache:
        g._cache[key] = build()
    return g._cache[key]


def _sel_cells(g):
    return _cached(g, "S_cells", lambda: lat.select(g.active))


def _sel_faces(g, i, interior=True):
    f = g.faces[i]
    return _cached(g, ("S_faces", i, interior), lambda: lat.select(f.interior if interior else f.exists))


def div_matrix(g: MacGrid) -> sp.csr_matrix:
    """Cells x flat velocity."""
    def build():
        geo = geometry(g)
        Sc = _sel_cells(g)
        blocks = []
        for i, f in enumerate(g.faces):
            Di = lat.diag(np.broadcast_to(1.0 / geo.h[i], g.shape)) @ lat.diff(f.shape, i)
            blocks.append(Sc @ Di @ _sel_faces(g, i).T)
        return sp.hstack(blocks, format="csr")
    return _cached(g, "div", build)


def grad_matrix(g: MacGrid, extended: bool = False) -> sp.csr_matrix:
    """Flat velocity x cells; with ``extended`` the rows run over all faces."""
    def build():
        geo = geometry(g)
        Sc = _sel_cells(g)
        blocks = []
        for i, f in enumerate(g.faces):
            inv = _safe_div(np.ones(f.shape), geo.dface[i])
            Gi = lat.diag(inv) @ lat.pad_diff(g.shape, i)
            blocks.append(_sel_faces(g, i, not extended) @ Gi @ Sc.T)
        return sp.vstack(blocks, format="csr")
    return _cached(g, ("grad", extended), build)


def laplacian_cells_matrix(g: MacGrid) -> sp.csr_matrix:
    def build():
        geo = geometry(g)
        Sc = _sel_cells(g)
        A = 0
        for i, f in enumerate(g.faces):
            T = _safe_div(geo.area[i], geo.dface[i])
            A = A + lat.diff(f.shape, i) @ lat.diag(T) @ lat.pad_diff(g.shape, i)
        return (lat.diag(1.0 / g.cell_volumes) @ (Sc @ (-A) @ Sc.T)).tocsr()
    return _cached(g, "lap_cells", build)


def _face_difference_matrix(g: MacGrid, i: int, j: int):
    shape = g.faces[i].shape
    return lat.diff(shape, i) if j == i else lat.pad_diff(shape, j)


def stiffness_matrix(g: MacGrid) -> sp.csr_matrix:
    """Gram matrix of the broken H1 inner product (flat velocity layout)."""
    def build():
        geo = geometry(g)
        blocks = []
        for i in range(g.dim):
            K = 0
            for j in range(g.dim):
                E = _face_difference_matrix(g, i, j)
                K = K + E.T @ lat.diag(geo.trans[i][j]) @ E
            S = _sel_faces(g, i)
            blocks.append(S @ K @ S.T)
        return sp.block_diag(blocks, format="csr")
    return _cached(g, "stiffness", build)


def dual_volumes_flat(g: MacGrid) -> np.ndarray:
    return np.concatenate([f.dual_volume[f.is_interior] for f in g.faces])


def laplacian_faces_matrix(g: MacGrid) -> sp.csr_matrix:
    return _cached(g, "lap_faces", lambda: (lat.diag(1.0 / dual_volumes_flat(g)) @ stiffness_matrix(g)).tocsr())


def dual_density_matrix(g: MacGrid) -> sp.csr_matrix:
    """Flat velocity x cells: dual-cell density on interior faces."""
    def build():
        geo = geometry(g)
        Sc = _sel_cells(g)
        blocks = []
        for i, f in enumerate(g.faces):
            inv = _safe_div(np.ones(f.shape), geo.dface[i])
            M = lat.diag(inv * f.half_lo) @ lat.pick_lo(g.shape, i) + lat.diag(inv * f.half_hi) @ lat.pick_hi(g.shape, i)
            blocks.append(_sel_faces(g, i) @ M @ Sc.T)
        return sp.vstack(blocks, format="csr")
    return _cached(g, "dual_density", build)


def upwind_matrix_rho(g: MacGrid, u: VelocityField) -> sp.csr_matrix:
    """Cells x cells: the map rho -> upwind divergence of rho u."""
    geo = geometry(g)
    Sc = _sel_cells(g)
    A = 0
    for i, f in enumerate(g.faces):
        ud = np.where(geo.interior[i], u[i].dense(), 0.0)
        pick = lat.diag(ud >= 0) @ lat.pick_lo(g.shape, i) + lat.diag(ud < 0) @ lat.pick_hi(g.shape, i)
        A = A + lat.diff(f.shape, i) @ lat.diag(geo.area[i] * ud) @ pick
    return (lat.diag(1.0 / g.cell_volumes) @ (Sc @ A @ Sc.T)).tocsr()


def upwind_matrix_u(g: MacGrid, rho: CellField, u: VelocityField) -> sp.csr_matrix:
    """Cells x flat velocity: the map v -> upwind divergence of rho_up v, with
    the donor cells frozen by the sign of ``u``."""
    geo = geometry(g)
    Sc = _sel_cells(g)
    rd = rho.dense()
    blocks = []
    for i, f in enumerate(g.faces):
        r_up = _upwind_density(g, rd, u[i].dense(), i)
        blocks.append(Sc @ lat.diff(f.shape, i) @ lat.diag(geo.area[i] * r_up) @ _sel_faces(g, i).T)
    return (lat.diag(1.0 / g.cell_volumes) @ sp.hstack(blocks, format="csr")).tocsr()


def convection_matrix(g: MacGrid, F: MassFluxes) -> sp.csr_matrix:
    """Flat velocity x flat velocity: v -> dual divergence of F v_eps with
    the mass fluxes frozen."""
    geo = geometry(g)
    blocks = []
    for i, f in enumerate(g.faces):
        D = dual_fluxes(F, i)
        C = 0
        for j, phi in enumerate(D.normal):
            if j == i:
                C = C + lat.pad_diff(g.shape, i) @ lat.diag(phi) @ lat.avg(f.shape, i)
            else:
                eshape = g.edge(i, j).shape
                C = C + lat.diff(eshape, j) @ lat.diag(phi) @ lat.pad_avg(f.shape, j)
        S = _sel_faces(g, i)
        blocks.append(lat.diag(1.0 / f.dual_volume[f.is_interior]) @ (S @ C @ S.T))
    return sp.block_diag(blocks, format="csr")


def write_coo(path, A: sp.spmatrix) -> None:
    """Write a sparse matrix as ``row col value`` lines (0-based indices)."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    with open(path, "w") as fh:
        fh.write(f"# {C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for k in order:
            fh.write(f"{C.row[k]} {C.col[k]} {C.data[k]:.17g}\n")


def solve_primal_poisson(rho: CellField, tol: float = 1e-10) -> CellField:
    """Solve -Delta_M w = rho with homogeneous Dirichlet data."""
    g = rho.grid
    A = laplacian_cells_matrix(g)
    # symmetric positive definite after scaling by the cell volumes
    K = (lat.diag(g.cell_volumes) @ A).tocsc()
    w = spla.spsolve(K, g.cell_volumes * rho.values)
    res = np.abs(A @ w - rho.values).max(initial=0.0)
    scale = 1.0 + np.abs(rho.values).max(initial=0.0)
    if not np.all(np.isfinite(w)) or res > tol * scale:
        raise RuntimeError(f"primal Poisson solve failed, residual {res:.3e}")
    return CellField(g, w)
