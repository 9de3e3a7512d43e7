"""Rectangular space-time grids on box domains, cell fields, and quadrature.

Cells are axis-aligned squares/intervals of uniform width ``h``; values live
at cell centers.  Homogeneous Dirichlet boundaries are realized by a ghost
ring of zero-valued cells, so fields never store boundary values.  Time is a
uniform partition of ``(0, T)`` into ``steps`` slabs of width ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "build_grid",
    "integrate",
    "level_set_measure",
]

# Relative slack for "T = steps * tau exactly" and equal-width checks.
_REL_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on a box, with a uniform time partition.

    Attributes:
        dim: spatial dimension, 1 or 2.
        bounds: per-axis (lo, hi) extents of the box.
        cells: per-axis cell counts.
        h: common cell width (all axes must agree).
        T: time horizon.
        steps: number of time steps.
        tau: time step width, T / steps.
        diameter: box diagonal, sup |x - y| over the box.
    """

    dim: int
    bounds: tuple[tuple[float, float], ...]
    cells: tuple[int, ...]
    h: float
    T: float
    steps: int
    tau: float
    diameter: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    def axis_centers(self, axis: int) -> np.ndarray:
        lo, _ = self.bounds[axis]
        return lo + (np.arange(self.cells[axis]) + 0.5) * self.h

    def centers(self) -> tuple[np.ndarray, ...]:
        """Cell-center coordinate arrays of shape ``cells`` (ij indexing)."""
        axes = [self.axis_centers(k) for k in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def center_points(self) -> np.ndarray:
        """All cell centers as an (num_cells, dim) array, C-ordered."""
        mesh = self.centers()
        return np.stack([m.ravel() for m in mesh], axis=1)

    def slab_centers(self) -> np.ndarray:
        """Midpoints of the time slabs, shape (steps,)."""
        return (np.arange(self.steps) + 0.5) * self.tau

    def boundary_distance(self) -> np.ndarray:
        """Distance from each cell center to the box boundary, shape ``cells``."""
        mesh = self.centers()
        dist = np.full(self.cells, np.inf)
        for k in range(self.dim):
            lo, hi = self.bounds[k]
            dist = np.minimum(dist, np.minimum(mesh[k] - lo, hi - mesh[k]))
        return dist

    def is_interior(self, point: Sequence[float]) -> bool:
        if len(point) != self.dim:
            raise ValueError(f"point has {len(point)} coordinates, grid is {self.dim}D")
        return all(lo < x < hi for x, (lo, hi) in zip(point, self.bounds))

    def time_step_index(self, t: float) -> int:
        """Index of the slab containing time t in (0, T]."""
        if not 0.0 < t <= self.T:
            raise ValueError(f"time {t} outside (0, {self.T}]")
        return min(int(t / self.tau), self.steps - 1)


def build_grid(
    dim: int,
    bounds: Sequence[Sequence[float]] | Sequence[float],
    cells: Sequence[int] | int,
    T: float = 1.0,
    steps: int = 1,
) -> Grid:
    """Construct a grid, validating extents, counts, and uniform cell width.

    ``bounds`` is (lo, hi) per axis (a flat pair is accepted in 1D); ``cells``
    is the per-axis count.  All axes must yield the same cell width.
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if isinstance(cells, (int, np.integer)):
        cells = (int(cells),) * dim
    cells = tuple(int(c) for c in cells)
    if len(cells) != dim:
        raise ValueError(f"expected {dim} cell counts, got {len(cells)}")
    if any(c < 4 for c in cells):
        raise ValueError(f"need at least 4 cells per axis, got {cells}")

    b = np.asarray(bounds, dtype=float)
    if b.ndim == 1:
        b = b.reshape(1, -1)
    if b.shape != (dim, 2):
        raise ValueError(f"expected {dim} (lo, hi) bound pairs, got shape {b.shape}")
    extents = b[:, 1] - b[:, 0]
    if np.any(extents <= 0):
        raise ValueError("box extents must be positive")

    widths = extents / np.asarray(cells)
    h = float(widths[0])
    if np.any(np.abs(widths - h) > _REL_TOL * h):
        raise ValueError(f"cell widths differ across axes: {widths.tolist()}")

    if T <= 0:
        raise ValueError(f"time horizon must be positive, got {T}")
    steps = int(steps)
    if steps < 1:
        raise ValueError(f"need at least one time step, got {steps}")
    tau = T / steps
    if abs(steps * tau - T) > _REL_TOL * T:
        raise ValueError("steps * tau does not reproduce T")

    diameter = float(math.sqrt(float(np.sum(extents**2))))
    return Grid(
        dim=dim,
        bounds=tuple((float(lo), float(hi)) for lo, hi in b),
        cells=cells,
        h=h,
        T=float(T),
        steps=steps,
        tau=tau,
        diameter=diameter,
    )


@dataclass(frozen=True)
class Field:
    """Scalar values per cell (spatial) or per cell per time step (space-time).

    Spatial fields have shape ``grid.cells``; space-time fields prepend the
    step axis, shape ``(steps, *cells)``.  Values are immutable and finite.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        spatial = self.grid.cells
        spacetime = (self.grid.steps, *self.grid.cells)
        if values.shape not in (spatial, spacetime):
            raise ValueError(
                f"field shape {values.shape} matches neither spatial {spatial} "
                f"nor space-time {spacetime}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def is_spacetime(self) -> bool:
        return self.values.ndim == self.grid.dim + 1

    @classmethod
    def zeros(cls, grid: Grid, spacetime: bool = False) -> "Field":
        shape = (grid.steps, *grid.cells) if spacetime else grid.cells
        return cls(grid, np.zeros(shape))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> "Field":
        """Sample ``fn(x[, y])`` at cell centers."""
        return cls(grid, np.asarray(fn(*grid.centers()), dtype=float))

    @classmethod
    def from_spacetime_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> "Field":
        """Sample ``fn(t, x[, y])`` at slab centers and cell centers."""
        mesh = grid.centers()
        slabs = grid.slab_centers()
        out = np.empty((grid.steps, *grid.cells))
        for j, t in enumerate(slabs):
            out[j] = fn(t, *mesh)
        return cls(grid, out)


def integrate(f: Field) -> float:
    """Midpoint-rule integral: sum of values times h^N (times tau in time)."""
    w = f.grid.cell_volume
    if f.is_spacetime:
        w *= f.grid.tau
    return float(np.sum(f.values) * w)


def level_set_measure(f: Field, k: float) -> float:
    """Space-time measure of ``{|f| > k}``.

    Spatial fields are read as constant in time, contributing a factor T.
    """
    if k <= 0:
        raise ValueError(f"threshold must be positive, got {k}")
    count = int(np.count_nonzero(np.abs(f.values) > k))
    w = f.grid.cell_volume
    w *= f.grid.tau if f.is_spacetime else f.grid.T
    return count * w
