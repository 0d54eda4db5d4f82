"""MAC grids on unions of axis-aligned boxes.

A grid is a structured lattice over the bounding box of the domain with a
mask of active cells.  Every geometric quantity is stored twice: as a dense
array over the relevant lattice (cells, faces of one direction, or edges of
one pair of directions) and, where it is indexed by ids, as a compressed
array over the active objects only.

Lattice conventions
-------------------
* cells live on the lattice of shape ``N = (n_1, ..., n_d)``;
* faces normal to ``e_i`` live on ``N + e_i``; the face at position ``a``
  along axis ``i`` separates cell ``a - 1`` (the *lo* cell) from cell ``a``
  (the *hi* cell);
* for ``i != j`` the boxes carrying the tangential derivatives live on
  ``N + e_i + e_j``: in 2D these are the lattice vertices, in 3D the lattice
  edges parallel to the remaining axis.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "DomainSpec",
    "FaceSet",
    "EdgeSet",
    "MacGrid",
    "build_grid",
    "mesh_size",
    "regularity",
]

_SNAP = 1e-10


@dataclass(frozen=True)
class DomainSpec:
    """Union of closed axis-aligned boxes.

    ``boxes`` holds one entry per box, each a sequence of ``(lo, hi)`` pairs,
    one pair per axis.
    """

    dimension: int
    boxes: tuple

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dimension}")
        if len(self.boxes) == 0:
            raise ValueError("domain needs at least one box")
        boxes = []
        for b, box in enumerate(self.boxes):
            box = tuple((float(lo), float(hi)) for lo, hi in box)
            if len(box) != self.dimension:
                raise ValueError(f"box {b} has {len(box)} axes, expected {self.dimension}")
            for a, (lo, hi) in enumerate(box):
                if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
                    raise ValueError(f"box {b} is degenerate along axis {a + 1}: [{lo}, {hi}]")
            boxes.append(box)
        object.__setattr__(self, "boxes", tuple(boxes))

    @classmethod
    def unit_box(cls, dimension: int = 2) -> "DomainSpec":
        return cls(dimension, (((0.0, 1.0),) * dimension,))

    @property
    def bounding_box(self) -> tuple:
        arr = np.array(self.boxes)  # (nbox, d, 2)
        return tuple((float(arr[:, a, 0].min()), float(arr[:, a, 1].max())) for a in range(self.dimension))

    def box_coordinates(self, axis: int) -> np.ndarray:
        """All distinct box boundary coordinates along ``axis``."""
        return np.unique(np.array([c for box in self.boxes for c in box[axis]]))

    def diameter(self) -> float:
        bb = np.array(self.bounding_box)
        return float(np.sqrt(np.sum((bb[:, 1] - bb[:, 0]) ** 2)))


@dataclass(frozen=True, eq=False)
class FaceSet:
    """Faces normal to one axis, with their dual cells.

    Dense arrays have the face-lattice shape; the remaining arrays are indexed
    by face id (lexicographic order of the lattice position).
    """

    direction: int
    shape: tuple
    exists: np.ndarray
    interior: np.ndarray
    ids: np.ndarray  # dense, -1 where no face
    half_lo: np.ndarray  # dense, half width of the lo cell if active else 0
    half_hi: np.ndarray
    area: np.ndarray  # dense |sigma|
    lattice: np.ndarray  # (n, d) lattice positions
    lo_cell: np.ndarray  # (n,) cell id or -1
    hi_cell: np.ndarray
    centers: np.ndarray  # (n, d)
    measure: np.ndarray  # (n,) |sigma|
    dual_lo: np.ndarray  # (n,) |D_{K,sigma}| for the lo cell
    dual_hi: np.ndarray
    is_interior: np.ndarray  # (n,) bool

    @property
    def count(self) -> int:
        return int(self.lattice.shape[0])

    @property
    def distance(self) -> np.ndarray:
        """Dense extent of D_sigma along the face normal (0 where no face)."""
        return self.half_lo + self.half_hi

    @property
    def dual_volume(self) -> np.ndarray:
        return self.dual_lo + self.dual_hi

    @property
    def interior_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_interior)


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Boxes carrying tangential derivatives for a pair of axes ``i < j``.

    ``ext[a]`` is the extent of the box along axis ``pair[a]``; ``other`` is
    the extent along the remaining axis (1 in 2D).  A box exists as soon as
    one of the four surrounding cells of the ``(i, j)`` plane is active.
    """

    pair: tuple
    shape: tuple
    exists: np.ndarray
    ext: tuple
    other: np.ndarray
    full: tuple  # per axis of the pair: both neighbouring rows carry faces

    @property
    def measure(self) -> np.ndarray:
        return self.ext[0] * self.ext[1] * self.other


@dataclass(frozen=True, eq=False)
class MacGrid:
    """Immutable MAC discretization of a box union.

    Use :func:`build_grid` to construct one.
    """

    spec: DomainSpec
    lines: tuple
    active: np.ndarray
    notes: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        d = self.spec.dimension
        widths = tuple(np.diff(x) for x in self.lines)
        centers = tuple(0.5 * (x[1:] + x[:-1]) for x in self.lines)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "centers_1d", centers)
        object.__setattr__(self, "shape", tuple(len(w) for w in widths))
        self.active.setflags(write=False)

        ids = np.full(self.shape, -1, dtype=np.int64)
        ids[self.active] = np.arange(int(self.active.sum()))
        object.__setattr__(self, "cell_ids", ids)
        lat = np.argwhere(self.active)
        object.__setattr__(self, "cell_lattice", lat)
        sizes = np.stack([widths[a][lat[:, a]] for a in range(d)], axis=1)
        object.__setattr__(self, "cell_sizes", sizes)
        object.__setattr__(self, "cell_centers", np.stack([centers[a][lat[:, a]] for a in range(d)], axis=1))
        object.__setattr__(self, "cell_volumes", np.prod(sizes, axis=1))
        object.__setattr__(self, "faces", tuple(self._build_faces(i) for i in range(d)))
        edges = {}
        for i, j in itertools.combinations(range(d), 2):
            edges[(i, j)] = self._build_edges(i, j)
        object.__setattr__(self, "edges", edges)
        # face ids of the two faces of each cell, per direction
        object.__setattr__(
            self,
            "cell_faces",
            tuple(
                np.stack(
                    [
                        self.faces[i].ids[tuple(lat.T)],
                        self.faces[i].ids[tuple((lat + np.eye(d, dtype=int)[i]).T)],
                    ],
                    axis=1,
                )
                for i in range(d)
            ),
        )

    # ------------------------------------------------------------------
    # construction helpers

    def _axis_view(self, arr: np.ndarray, axis: int) -> np.ndarray:
        shape = [1] * self.dim
        shape[axis] = arr.size
        return arr.reshape(shape)

    def _build_faces(self, i: int) -> FaceSet:
        d = self.dim
        pad = [(0, 0)] * d
        pad[i] = (1, 1)
        act = np.pad(self.active, pad, constant_values=False)
        n = self.shape[i]
        lo = np.take(act, np.arange(n + 1), axis=i)
        hi = np.take(act, np.arange(1, n + 2), axis=i)
        exists = lo | hi
        interior = lo & hi
        hpad = np.concatenate([[0.0], self.widths[i], [0.0]])
        half_lo = np.where(lo, self._axis_view(hpad[:-1] / 2, i), 0.0)
        half_hi = np.where(hi, self._axis_view(hpad[1:] / 2, i), 0.0)
        area = np.ones(exists.shape)
        for k in range(d):
            if k != i:
                area = area * self._axis_view(self.widths[k], k)
        ids = np.full(exists.shape, -1, dtype=np.int64)
        ids[exists] = np.arange(int(exists.sum()))
        lat = np.argwhere(exists)
        cid = np.pad(self.cell_ids, pad, constant_values=-1)
        lo_cell = np.take(cid, np.arange(n + 1), axis=i)[exists]
        hi_cell = np.take(cid, np.arange(1, n + 2), axis=i)[exists]
        centers = np.empty(lat.shape)
        for k in range(d):
            centers[:, k] = self.lines[k][lat[:, k]] if k == i else self.centers_1d[k][lat[:, k]]
        measure = area[exists]
        for a in (exists, interior, ids, half_lo, half_hi, area):
            a.setflags(write=False)
        return FaceSet(
            direction=i,
            shape=exists.shape,
            exists=exists,
            interior=interior,
            ids=ids,
            half_lo=half_lo,
            half_hi=half_hi,
            area=area,
            lattice=lat,
            lo_cell=lo_cell,
            hi_cell=hi_cell,
            centers=centers,
            measure=measure,
            dual_lo=measure * half_lo[exists],
            dual_hi=measure * half_hi[exists],
            is_interior=interior[exists],
        )

    def _build_edges(self, i: int, j: int) -> EdgeSet:
        d = self.dim
        pad = [(0, 0)] * d
        pad[i] = pad[j] = (1, 1)
        act = np.pad(self.active, pad, constant_values=False)
        ni, nj = self.shape[i], self.shape[j]

        def corner(si, sj):
            a = np.take(act, np.arange(si, ni + 1 + si), axis=i)
            return np.take(a, np.arange(sj, nj + 1 + sj), axis=j)

        mm, pm, mp, pp = corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1)
        exists = mm | pm | mp | pp
        ext = []
        full = []
        for axis, (lo_any, hi_any) in ((i, (mm | mp, pm | pp)), (j, (mm | pm, mp | pp))):
            hpad = np.concatenate([[0.0], self.widths[axis], [0.0]])
            e = np.where(lo_any, self._axis_view(hpad[:-1] / 2, axis), 0.0)
            e = e + np.where(hi_any, self._axis_view(hpad[1:] / 2, axis), 0.0)
            ext.append(e)
            full.append(lo_any & hi_any)
        other = np.ones(exists.shape)
        for k in range(d):
            if k not in (i, j):
                other = other * self._axis_view(self.widths[k], k)
        return EdgeSet(pair=(i, j), shape=exists.shape, exists=exists, ext=tuple(ext), other=other, full=tuple(full))

    # ------------------------------------------------------------------
    # basic queries

    @property
    def dim(self) -> int:
        return self.spec.dimension

    @property
    def n_cells(self) -> int:
        return int(self.cell_lattice.shape[0])

    @property
    def volume(self) -> float:
        return float(self.cell_volumes.sum())

    @property
    def dense_volume(self) -> np.ndarray:
        """Cell volumes over the full lattice, 0 on inactive cells."""
        vol = np.ones(self.shape)
        for k in range(self.dim):
            vol = vol * self._axis_view(self.widths[k], k)
        return np.where(self.active, vol, 0.0)

    def width_view(self, axis: int) -> np.ndarray:
        """Cell widths along ``axis`` shaped for broadcasting over the cell lattice."""
        return self._axis_view(self.widths[axis], axis)

    @property
    def n_interior(self) -> tuple:
        return tuple(int(f.is_interior.sum()) for f in self.faces)

    @property
    def n_velocity(self) -> int:
        """Length of the flat vector of interior face unknowns."""
        return sum(self.n_interior)

    def velocity_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_interior)])

    def edge(self, i: int, j: int) -> EdgeSet:
        """Edge boxes of the unordered pair ``{i, j}``."""
        return self.edges[(min(i, j), max(i, j))]

    def edge_extent(self, i: int, j: int, axis: int) -> np.ndarray:
        e = self.edge(i, j)
        return e.ext[e.pair.index(axis)]

    # dense <-> compressed ------------------------------------------------

    def cells_to_dense(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.active] = values
        return out

    def dense_to_cells(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr)[self.active]

    def faces_to_dense(self, i: int, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.faces[i].shape)
        out[self.faces[i].exists] = values
        return out

    def dense_to_faces(self, i: int, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr)[self.faces[i].exists]

    # neighbour sets ------------------------------------------------------

    def face_neighbors(self, j: int, i: int) -> np.ndarray:
        """For every face of direction ``j``, the ids of the direction-``i``
        faces of its two adjacent cells (``-1`` where a cell is missing).

        Columns are (lo cell, lo face), (lo cell, hi face), (hi cell, lo face),
        (hi cell, hi face).
        """
        fj = self.faces[j]
        out = np.full((fj.count, 4), -1, dtype=np.int64)
        for c, cells in enumerate((fj.lo_cell, fj.hi_cell)):
            ok = cells >= 0
            out[ok, 2 * c : 2 * c + 2] = self.cell_faces[i][cells[ok]]
        return out

    def dual_faces(self, i: int) -> dict:
        """Tabulate the dual faces of the direction-``i`` mesh.

        Returns a dict of arrays, one entry per dual face: ``normal`` axis,
        ``kind`` (1 when the face lies inside a primal cell, 2 when it
        straddles two primal faces), ``minus`` and ``plus`` face ids (``plus``
        is ``-1`` for boundary dual faces; ``minus`` is then the only
        adjacent face and ``sign`` the outward orientation along the normal),
        ``area`` and ``distance``.
        """
        fi = self.faces[i]
        d = self.dim
        rows = {k: [] for k in ("normal", "kind", "minus", "plus", "sign", "area", "distance")}

        def add(normal, kind, minus, plus, sign, area, dist):
            rows["normal"].append(np.full(minus.size, normal))
            rows["kind"].append(np.full(minus.size, kind))
            rows["minus"].append(minus)
            rows["plus"].append(plus)
            rows["sign"].append(sign)
            rows["area"].append(area)
            rows["distance"].append(dist)

        lo, hi = self.cell_faces[i][:, 0], self.cell_faces[i][:, 1]
        h = self.cell_sizes[:, i]
        add(i, 1, lo, hi, np.ones(lo.size), self.cell_volumes / h, h)
        for j in range(d):
            if j == i:
                continue
            e = self.edge(i, j)
            ext_i = self.edge_extent(i, j, i)
            ext_j = self.edge_extent(i, j, j)
            area = ext_i * e.other
            n = fi.shape[j]
            # dense face ids padded with -1 along j, below/above each edge box
            pad = [(0, 0)] * d
            pad[j] = (1, 1)
            fid = np.pad(fi.ids, pad, constant_values=-1)
            below = np.take(fid, np.arange(n + 1), axis=j)
            above = np.take(fid, np.arange(1, n + 2), axis=j)
            m = e.exists
            b, a = below[m], above[m]
            inner = (b >= 0) & (a >= 0)
            add(j, 2, b[inner], a[inner], np.ones(inner.sum()), area[m][inner], ext_j[m][inner])
            only_b = (b >= 0) & (a < 0)
            add(j, 2, b[only_b], a[only_b], np.ones(only_b.sum()), area[m][only_b], ext_j[m][only_b])
            only_a = (a >= 0) & (b < 0)
            add(j, 2, a[only_a], b[only_a], -np.ones(only_a.sum()), area[m][only_a], ext_j[m][only_a])
        return {k: np.concatenate(v) for k, v in rows.items()}

    # reporting -----------------------------------------------------------

    def summary(self) -> str:
        lines = [
            f"dimension: {self.dim}",
            f"lattice: {' x '.join(str(n) for n in self.shape)}",
            f"cells: {self.n_cells}",
        ]
        for f in self.faces:
            lines.append(
                f"faces_{f.direction + 1}: {f.count} (interior {int(f.is_interior.sum())}, "
                f"exterior {int((~f.is_interior).sum())})"
            )
        lines += [
            f"volume: {self.volume:.17g}",
            f"h: {mesh_size(self):.17g}",
            f"eta: {regularity(self):.17g}",
        ]
        lines += [f"warning: {w}" for w in self.notes]
        return "\n".join(lines) + "\n"


def _lines_from_refinement(spec: DomainSpec, refinement) -> list:
    d = spec.dimension
    bb = spec.bounding_box
    if isinstance(refinement, (int, np.integer)):
        refinement = (int(refinement),) * d
    refinement = list(refinement)
    if len(refinement) != d:
        raise ValueError(f"refinement needs {d} entries, got {len(refinement)}")
    lines = []
    for a, r in enumerate(refinement):
        if np.isscalar(r):
            n = int(r)
            if n < 1 or n != r:
                raise ValueError(f"cell count along axis {a + 1} must be a positive integer, got {r}")
            x = np.linspace(bb[a][0], bb[a][1], n + 1)
        else:
            x = np.asarray(r, dtype=float).copy()
            if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
                raise ValueError(f"coordinate lines along axis {a + 1} must be strictly increasing")
        lines.append(x)
    return lines


def build_grid(spec: DomainSpec, refinement) -> MacGrid:
    """Build the MAC grid of ``spec``.

    ``refinement`` is either an int (same number of uniform cells per axis
    over the bounding box), a sequence of ints (per-axis counts), or a
    sequence of per-axis coordinate arrays.
    """
    d = spec.dimension
    lines = _lines_from_refinement(spec, refinement)
    bb = spec.bounding_box
    for a in range(d):
        x = lines[a]
        scale = max(1.0, float(bb[a][1] - bb[a][0]))
        for c in spec.box_coordinates(a):
            k = int(np.argmin(np.abs(x - c)))
            if abs(x[k] - c) > _SNAP * scale:
                raise ValueError(
                    f"box coordinate {float(c)!r} on axis {a + 1} is not a grid line; "
                    "the boxes admit no structured partition with these lines"
                )
            x[k] = c
        if x[0] != bb[a][0] or x[-1] != bb[a][1]:
            raise ValueError(f"coordinate lines on axis {a + 1} must span [{bb[a][0]}, {bb[a][1]}]")
        if np.any(np.diff(x) <= 0):
            raise ValueError(f"coordinate lines on axis {a + 1} collapse after snapping to box coordinates")

    centers = [0.5 * (x[1:] + x[:-1]) for x in lines]
    mesh = np.meshgrid(*centers, indexing="ij")
    active = np.zeros(mesh[0].shape, dtype=bool)
    for box in spec.boxes:
        inside = np.ones_like(active)
        for a, (lo, hi) in enumerate(box):
            inside &= (mesh[a] > lo) & (mesh[a] < hi)
        active |= inside

    _, ncomp = ndimage.label(active, structure=ndimage.generate_binary_structure(d, 1))
    if ncomp != 1:
        raise ValueError(f"domain is not connected through faces ({ncomp} components)")
    for i, j in itertools.combinations(range(d), 2):
        sl = [slice(None)] * d
        def part(si, sj):
            s = list(sl)
            s[i] = slice(si, active.shape[i] - 1 + si)
            s[j] = slice(sj, active.shape[j] - 1 + sj)
            return active[tuple(s)]
        mm, pm, mp, pp = part(0, 0), part(1, 0), part(0, 1), part(1, 1)
        pinch = (mm & pp & ~pm & ~mp) | (pm & mp & ~mm & ~pp)
        if pinch.any():
            where = tuple(int(v) for v in np.argwhere(pinch)[0])
            raise ValueError(f"domain has a pinched corner near lattice cell {where}")

    notes = []
    for a, x in enumerate(lines):
        if x.size == 2:
            msg = f"axis {a + 1} has a single cell; no interior faces along it"
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
    return MacGrid(spec=spec, lines=tuple(lines), active=active, notes=tuple(notes))


def mesh_size(g: MacGrid) -> float:
    """Largest cell diameter."""
    return float(np.sqrt((g.cell_sizes**2).sum(axis=1)).max())


def regularity(g: MacGrid) -> float:
    """Smallest cell width over all cells and axes, relative to the mesh size."""
    return float(g.cell_sizes.min() / mesh_size(g))


def uniform_square(n: int, dimension: int = 2) -> MacGrid:
    return build_grid(DomainSpec.unit_box(dimension), n)


def l_shape(n: int) -> MacGrid:
    """[0,1]^2 with the strip [1,2]x[0,0.5] attached, ``n`` cells per unit length."""
    spec = DomainSpec(2, (((0.0, 1.0), (0.0, 1.0)), ((1.0, 2.0), (0.0, 0.5))))
    return build_grid(spec, (2 * n, n))


def grid_from_lines(spec: DomainSpec, lines: Sequence[np.ndarray]) -> MacGrid:
    return build_grid(spec, [np.asarray(x, float) for x in lines])
