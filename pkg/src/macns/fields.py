"""Discrete fields and the operators linking them to continuous data.

Cell fields hold one value per active cell.  Face fields hold one value per
face of a given direction, interior and exterior alike; a face field flagged
``zero_on_boundary`` vanishes on every exterior face.  Integrals of face
fields are taken over the dual cells.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import MacGrid

__all__ = [
    "AnalyticFunction",
    "CellField",
    "FaceField",
    "VelocityField",
    "project_cells",
    "project_faces_mean",
    "fortin_interpolate",
    "interpolate_phi",
    "reconstruct_face",
    "reconstruct_cell",
    "write_cell_csv",
    "write_face_csv",
    "read_cell_csv",
]

BOUNDARY_TRACE_TOL = 1e-10


def _frozen(values, n: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{what} needs {n} values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CellField:
    grid: MacGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.n_cells, "cell field"))

    @classmethod
    def constant(cls, grid: MacGrid, c: float) -> "CellField":
        return cls(grid, np.full(grid.n_cells, float(c)))

    def dense(self) -> np.ndarray:
        return self.grid.cells_to_dense(self.values)

    def integral(self) -> float:
        return float(self.grid.cell_volumes @ self.values)

    def dot(self, other: "CellField") -> float:
        return float(self.grid.cell_volumes @ (self.values * other.values))

    def norm(self, q: float = 2.0) -> float:
        if np.isinf(q):
            return float(np.abs(self.values).max(initial=0.0))
        return float((self.grid.cell_volumes @ np.abs(self.values) ** q) ** (1.0 / q))

    def __add__(self, other):
        return CellField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return CellField(self.grid, self.values - other.values)

    def __mul__(self, a: float):
        return CellField(self.grid, a * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return CellField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class FaceField:
    grid: MacGrid
    direction: int
    values: np.ndarray
    zero_on_boundary: bool = True

    def __post_init__(self):
        f = self.grid.faces[self.direction]
        vals = _frozen(self.values, f.count, f"face field {self.direction + 1}")
        if self.zero_on_boundary and np.any(vals[~f.is_interior] != 0.0):
            bad = int(np.flatnonzero((vals != 0.0) & ~f.is_interior)[0])
            raise ValueError(f"face field {self.direction + 1} is nonzero on exterior face {bad}")
        object.__setattr__(self, "values", vals)

    @property
    def faces(self):
        return self.grid.faces[self.direction]

    def dense(self) -> np.ndarray:
        return self.grid.faces_to_dense(self.direction, self.values)

    def interior_values(self) -> np.ndarray:
        return self.values[self.faces.is_interior]

    def dot(self, other: "FaceField") -> float:
        return float(self.faces.dual_volume @ (self.values * other.values))

    def norm(self, q: float = 2.0) -> float:
        if np.isinf(q):
            return float(np.abs(self.values).max(initial=0.0))
        return float((self.faces.dual_volume @ np.abs(self.values) ** q) ** (1.0 / q))

    def _like(self, values, other=None):
        zb = self.zero_on_boundary and (other is None or other.zero_on_boundary)
        return FaceField(self.grid, self.direction, values, zb)

    def __add__(self, other):
        return self._like(self.values + other.values, other)

    def __sub__(self, other):
        return self._like(self.values - other.values, other)

    def __mul__(self, a: float):
        return self._like(a * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.values)


@dataclass(frozen=True, eq=False)
class VelocityField:
    """One face field per direction.

    Velocities proper vanish on the boundary; the same container also carries
    face-wise quantities without that property (e.g. extended gradients).
    """

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        g = comps[0].grid
        if len(comps) != g.dim or any(c.grid is not g for c in comps):
            raise ValueError("velocity components must share one grid and match its dimension")
        if any(c.direction != i for i, c in enumerate(comps)):
            raise ValueError("velocity components must be ordered by direction")
        object.__setattr__(self, "components", comps)

    @property
    def grid(self) -> MacGrid:
        return self.components[0].grid

    @property
    def zero_on_boundary(self) -> bool:
        return all(c.zero_on_boundary for c in self.components)

    def __getitem__(self, i: int) -> FaceField:
        return self.components[i]

    @classmethod
    def zeros(cls, grid: MacGrid) -> "VelocityField":
        return cls(tuple(FaceField(grid, i, np.zeros(f.count)) for i, f in enumerate(grid.faces)))

    @classmethod
    def from_arrays(cls, grid: MacGrid, arrays: Sequence[np.ndarray], zero_on_boundary: bool = True):
        return cls(tuple(FaceField(grid, i, a, zero_on_boundary) for i, a in enumerate(arrays)))

    @classmethod
    def from_flat(cls, grid: MacGrid, vec: np.ndarray) -> "VelocityField":
        """Build from the concatenated interior values (the solver layout)."""
        off = grid.velocity_offsets()
        if vec.shape != (off[-1],):
            raise ValueError(f"flat velocity needs {off[-1]} values, got {vec.shape}")
        arrays = []
        for i, f in enumerate(grid.faces):
            a = np.zeros(f.count)
            a[f.is_interior] = vec[off[i] : off[i + 1]]
            arrays.append(a)
        return cls.from_arrays(grid, arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([c.interior_values() for c in self.components])

    def dense(self) -> list:
        return [c.dense() for c in self.components]

    def dot(self, other: "VelocityField") -> float:
        return sum(a.dot(b) for a, b in zip(self.components, other.components))

    def norm(self, q: float = 2.0) -> float:
        if np.isinf(q):
            return max(c.norm(q) for c in self.components)
        return float(sum(c.norm(q) ** q for c in self.components) ** (1.0 / q))

    def __add__(self, other):
        return VelocityField(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other):
        return VelocityField(tuple(a - b for a, b in zip(self.components, other.components)))

    def __mul__(self, a: float):
        return VelocityField(tuple(a * c for c in self.components))

    __rmul__ = __mul__

    def __neg__(self):
        return VelocityField(tuple(-c for c in self.components))


@dataclass(frozen=True)
class AnalyticFunction:
    """A function on the domain, evaluated on point arrays of shape (..., d).

    Scalar functions return shape (...), vector functions (..., d).
    """

    fn: Callable[[np.ndarray], np.ndarray]
    vector: bool = False
    order: int = 5

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)


def _as_function(f, vector: bool) -> AnalyticFunction:
    return f if isinstance(f, AnalyticFunction) else AnalyticFunction(f, vector=vector)


def gauss_rule(order: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def box_integrals(f: AnalyticFunction, lo: np.ndarray, hi: np.ndarray, component: int | None = None) -> np.ndarray:
    """Integrals of ``f`` over boxes ``[lo, hi]`` (arrays of shape (n, d)).

    Axes where ``lo == hi`` are treated as collapsed, giving the integral over
    the lower-dimensional box (used for faces).
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    n, d = lo.shape
    x1, w1 = gauss_rule(f.order)
    width = hi - lo
    pts = []
    wts = []
    for a in range(d):
        flat = np.all(width[:, a] == 0.0)
        if flat:
            pts.append(lo[:, a : a + 1])
            wts.append(np.ones((n, 1)))
        else:
            pts.append(lo[:, a : a + 1] + width[:, a : a + 1] * x1)
            wts.append(width[:, a : a + 1] * w1)
    idx = np.array(list(itertools.product(*[range(p.shape[1]) for p in pts])))
    points = np.stack([pts[a][:, idx[:, a]] for a in range(d)], axis=-1)
    weights = np.prod(np.stack([wts[a][:, idx[:, a]] for a in range(d)]), axis=0)
    vals = f(points.reshape(-1, d))
    if component is not None:
        vals = vals[..., component]
    return (vals.reshape(weights.shape) * weights).sum(axis=1)


def project_cells(q, g: MacGrid) -> CellField:
    """Cell means of a scalar function."""
    q = _as_function(q, False)
    lo = g.cell_centers - 0.5 * g.cell_sizes
    hi = g.cell_centers + 0.5 * g.cell_sizes
    return CellField(g, box_integrals(q, lo, hi) / g.cell_volumes)


def _face_box(g: MacGrid, i: int, ids: np.ndarray):
    f = g.faces[i]
    c = f.centers[ids]
    lat = f.lattice[ids]
    lo = np.empty_like(c)
    hi = np.empty_like(c)
    for k in range(g.dim):
        if k == i:
            lo[:, k] = hi[:, k] = c[:, k]
        else:
            h = g.widths[k][lat[:, k]]
            lo[:, k] = c[:, k] - 0.5 * h
            hi[:, k] = c[:, k] + 0.5 * h
    return lo, hi


def project_faces_mean(v, g: MacGrid) -> VelocityField:
    """Means of each velocity component over the interior dual cells."""
    v = _as_function(v, True)
    arrays = []
    for i, f in enumerate(g.faces):
        ids = f.interior_ids
        lo, hi = _face_box(g, i, ids)
        total = np.zeros(ids.size)
        for half, sign in ((f.half_lo, -1.0), (f.half_hi, 1.0)):
            ext = half[f.exists][ids]
            a, b = lo.copy(), hi.copy()
            if sign < 0:
                a[:, i] -= ext
            else:
                b[:, i] += ext
            total += box_integrals(v, a, b, component=i)
        out = np.zeros(f.count)
        out[ids] = total / f.dual_volume[ids]
        arrays.append(out)
    return VelocityField.from_arrays(g, arrays)


def fortin_interpolate(v, g: MacGrid, tol: float = BOUNDARY_TRACE_TOL) -> VelocityField:
    """Face means of each velocity component.

    Exterior faces must carry a vanishing mean; otherwise the data is not a
    zero-trace field and a ``ValueError`` names the offending face.
    """
    v = _as_function(v, True)
    arrays = []
    for i, f in enumerate(g.faces):
        ids = np.arange(f.count)
        lo, hi = _face_box(g, i, ids)
        means = box_integrals(v, lo, hi, component=i) / f.measure
        ext = ~f.is_interior
        bad = np.flatnonzero(ext & (np.abs(means) > tol))
        if bad.size:
            k = int(bad[0])
            raise ValueError(
                f"nonzero boundary trace {means[k]:.3e} on exterior face {k} of direction {i + 1} "
                f"at {tuple(float(x) for x in f.centers[k])}"
            )
        means[ext] = 0.0
        arrays.append(means)
    return VelocityField.from_arrays(g, arrays)


def interpolate_phi(phi, g: MacGrid) -> CellField:
    """Point values at the cell centers."""
    phi = _as_function(phi, False)
    return CellField(g, phi(g.cell_centers))


def reconstruct_face(v: FaceField, j: int) -> FaceField:
    """Average of the direction-``i`` faces of the two cells around each
    interior face of direction ``j`` (``i`` being the direction of ``v``).
    Missing or exterior faces contribute 0 and the divisor stays 4."""
    g = v.grid
    if j == v.direction:
        return FaceField(g, j, v.values.copy(), v.zero_on_boundary)
    nb = g.face_neighbors(j, v.direction)
    vals = np.where(nb >= 0, v.values[np.maximum(nb, 0)], 0.0).sum(axis=1) / 4.0
    vals[~g.faces[j].is_interior] = 0.0
    return FaceField(g, j, vals)


def reconstruct_cell(v: FaceField) -> CellField:
    """Mean of the two faces of each cell in the direction of ``v``."""
    cf = v.grid.cell_faces[v.direction]
    return CellField(v.grid, 0.5 * (v.values[cf[:, 0]] + v.values[cf[:, 1]]))


# ----------------------------------------------------------------------
# CSV serialization

def _coord_header(d: int) -> list:
    return ["id"] + ["x", "y", "z"][:d]


def _write_rows(path, header, ids, coords, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(ids)):
            w.writerow([int(ids[k])] + [f"{x:.17g}" for x in coords[k]] + [f"{c[k]:.17g}" for c in columns])


def write_cell_csv(path, field: CellField) -> None:
    g = field.grid
    _write_rows(path, _coord_header(g.dim) + ["value"], np.arange(g.n_cells), g.cell_centers, [field.values])


def write_face_csv(path, field: FaceField) -> None:
    f = field.faces
    _write_rows(path, _coord_header(field.grid.dim) + ["value"], np.arange(f.count), f.centers, [field.values])


def read_cell_csv(path, g: MacGrid, columns: int = 1) -> np.ndarray:
    """Read per-cell samples written in the cell CSV layout.

    With ``columns > 1`` the file carries that many value columns after the
    coordinates.  Ids and coordinates are checked against ``g``.
    """
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = g.dim
    if data.shape != (g.n_cells, 1 + d + columns):
        raise ValueError(f"{path}: expected {g.n_cells} rows of {1 + d + columns} columns, got {data.shape}")
    if np.any(data[:, 0] != np.arange(g.n_cells)):
        raise ValueError(f"{path}: cell ids must be 0..{g.n_cells - 1} in order")
    if not np.allclose(data[:, 1 : 1 + d], g.cell_centers, rtol=0, atol=1e-12):
        raise ValueError(f"{path}: cell coordinates do not match the grid")
    vals = data[:, 1 + d :]
    return vals[:, 0] if columns == 1 else vals
