"""Bounded Radon measures on the box and on the space-time cylinder.

A measure is atoms plus a cell density; the atoms stand in for the singular
part, the density for the diffuse part.  Space-time measures additionally
carry product terms (spatial measure tensor a per-step time profile) and are
canonically reduced to per-step spatial slices, which is the form every
solver consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Field, Grid

__all__ = [
    "SpatialMeasure",
    "SpaceTimeMeasure",
    "dirac",
    "product",
    "mollify",
    "inf_measures",
    "truncate_restrict",
    "measure_leq",
    "atom_smoothed_density",
]

Atom = tuple[tuple[float, ...], float]

# Decimal places used to decide that two atom locations coincide.
_LOC_DECIMALS = 12


def _as_point(location, dim: int) -> tuple[float, ...]:
    if np.isscalar(location):
        point = (float(location),)
    else:
        point = tuple(float(c) for c in location)
    if len(point) != dim:
        raise ValueError(f"location {point} has {len(point)} coordinates, expected {dim}")
    return point


def _freeze(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is None:
        return None
    arr = np.asarray(arr, dtype=float).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpatialMeasure:
    """Signed bounded measure on the box: point atoms plus a cell density.

    ``grid`` may be None for atoms-only measures used by the potential-theory
    operators on all of R^N; then ``dim`` fixes the ambient dimension and no
    density is allowed.
    """

    dim: int
    atoms: tuple[Atom, ...] = ()
    density: np.ndarray | None = None
    grid: Grid | None = None

    def __post_init__(self):
        atoms = tuple((_as_point(loc, self.dim), float(m)) for loc, m in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if self.grid is not None and self.grid.dim != self.dim:
            raise ValueError("grid dimension disagrees with measure dimension")
        if self.density is not None:
            if self.grid is None:
                raise ValueError("a density requires a grid")
            if np.asarray(self.density).shape != self.grid.cells:
                raise ValueError("density shape does not match the grid")
            object.__setattr__(self, "density", _freeze(self.density))
        for loc, _ in atoms:
            if self.grid is not None and not self.grid.is_interior(loc):
                raise ValueError(f"atom at {loc} is not strictly inside the box")
        if not np.isfinite(self.total_variation()):
            raise ValueError("measure must have finite total variation")

    # -- basic functionals -------------------------------------------------

    def atom_masses(self) -> np.ndarray:
        return np.array([m for _, m in self.atoms]) if self.atoms else np.zeros(0)

    def density_cell_masses(self) -> np.ndarray:
        """Mass carried by each cell of the density part (flattened)."""
        if self.density is None:
            return np.zeros(0)
        return self.density.ravel() * self.grid.cell_volume

    def mass(self) -> float:
        return float(np.sum(self.atom_masses()) + np.sum(self.density_cell_masses()))

    def total_variation(self) -> float:
        return float(
            np.sum(np.abs(self.atom_masses())) + np.sum(np.abs(self.density_cell_masses()))
        )

    def is_nonnegative(self, tol: float = 0.0) -> bool:
        if any(m < -tol for _, m in self.atoms):
            return False
        return self.density is None or bool(np.all(self.density >= -tol))

    # -- algebra ------------------------------------------------------------

    def scaled(self, c: float) -> "SpatialMeasure":
        dens = None if self.density is None else self.density * c
        return SpatialMeasure(
            self.dim, tuple((loc, c * m) for loc, m in self.atoms), dens, self.grid
        )

    def plus(self, other: "SpatialMeasure") -> "SpatialMeasure":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        grid = self.grid or other.grid
        dens = None
        if self.density is not None or other.density is not None:
            dens = np.zeros(grid.cells)
            if self.density is not None:
                dens += self.density
            if other.density is not None:
                dens += other.density
        return SpatialMeasure(self.dim, self.atoms + other.atoms, dens, grid)

    def positive_part(self) -> "SpatialMeasure":
        atoms = tuple((loc, m) for loc, m in self.atoms if m > 0)
        dens = None if self.density is None else np.maximum(self.density, 0.0)
        return SpatialMeasure(self.dim, atoms, dens, self.grid)

    def negative_part(self) -> "SpatialMeasure":
        """The nonnegative measure mu^- with mu = mu^+ - mu^-."""
        atoms = tuple((loc, -m) for loc, m in self.atoms if m < 0)
        dens = None if self.density is None else np.maximum(-self.density, 0.0)
        return SpatialMeasure(self.dim, atoms, dens, self.grid)

    def grouped_atoms(self) -> dict[tuple, float]:
        """Atom masses merged by (rounded) location."""
        out: dict[tuple, float] = {}
        for loc, m in self.atoms:
            key = tuple(round(c, _LOC_DECIMALS) for c in loc)
            out[key] = out.get(key, 0.0) + m
        return out

    def with_density(self, values: np.ndarray) -> "SpatialMeasure":
        return SpatialMeasure(self.dim, self.atoms, values, self.grid)


@dataclass(frozen=True)
class SpaceTimeMeasure:
    """Signed bounded measure on Q = box x (0, T).

    Parts: atoms at interior points of Q, a per-step density, and product
    terms (spatial measure, per-step profile F >= 0).  The per-step slices
    carry the measure of each time slab as a SpatialMeasure and are the
    canonical form used by solvers and by the measure lattice.
    """

    grid: Grid
    atoms: tuple[tuple[tuple[float, ...], float, float], ...] = ()  # (x, t, mass)
    density: np.ndarray | None = None
    products: tuple[tuple[SpatialMeasure, np.ndarray], ...] = ()

    def __post_init__(self):
        atoms = []
        for loc, t, m in self.atoms:
            point = _as_point(loc, self.grid.dim)
            t = float(t)
            if not self.grid.is_interior(point):
                raise ValueError(f"atom at {point} is not strictly inside the box")
            if not 0.0 < t < self.grid.T:
                raise ValueError(f"atom time {t} is not strictly inside (0, {self.grid.T})")
            atoms.append((point, t, float(m)))
        object.__setattr__(self, "atoms", tuple(atoms))
        if self.density is not None:
            if np.asarray(self.density).shape != (self.grid.steps, *self.grid.cells):
                raise ValueError("space-time density shape must be (steps, *cells)")
            object.__setattr__(self, "density", _freeze(self.density))
        prods = []
        for omega, profile in self.products:
            if omega.grid is not None and omega.grid is not self.grid:
                if omega.grid.cells != self.grid.cells or omega.grid.bounds != self.grid.bounds:
                    raise ValueError("product spatial measure lives on a different grid")
            profile = np.asarray(profile, dtype=float)
            if profile.shape != (self.grid.steps,):
                raise ValueError("time profile must have one value per step")
            if np.any(profile < 0):
                raise ValueError("time profile F must be nonnegative")
            prods.append((omega, _freeze(profile)))
        object.__setattr__(self, "products", tuple(prods))
        if not np.isfinite(self.total_variation()):
            raise ValueError("measure must have finite total variation")

    # -- canonical per-step form --------------------------------------------

    def slices(self) -> list[SpatialMeasure]:
        """Spatial measure of each time slab (already integrated in t)."""
        g = self.grid
        atoms_per_step: list[list[Atom]] = [[] for _ in range(g.steps)]
        for loc, t, m in self.atoms:
            atoms_per_step[g.time_step_index(t)].append((loc, m))
        dens_per_step = None
        if self.density is not None:
            dens_per_step = self.density * g.tau
        out = []
        for j in range(g.steps):
            atoms = list(atoms_per_step[j])
            dens = None if dens_per_step is None else dens_per_step[j].copy()
            for omega, profile in self.products:
                w = profile[j] * g.tau
                if w == 0.0:
                    continue
                atoms.extend((loc, m * w) for loc, m in omega.atoms)
                if omega.density is not None:
                    if dens is None:
                        dens = np.zeros(g.cells)
                    dens = dens + omega.density * w
            out.append(SpatialMeasure(g.dim, tuple(atoms), dens, g))
        return out

    @classmethod
    def from_slices(cls, grid: Grid, slices: list[SpatialMeasure]) -> "SpaceTimeMeasure":
        """Rebuild a measure from per-slab spatial measures.

        Slab atoms are placed at the slab midpoint; slab density mass d*h^N
        becomes a space-time density d/tau.
        """
        if len(slices) != grid.steps:
            raise ValueError("need one slice per time step")
        mids = grid.slab_centers()
        atoms = []
        density = None
        for j, s in enumerate(slices):
            for loc, m in s.atoms:
                if m != 0.0:
                    atoms.append((loc, mids[j], m))
            if s.density is not None:
                if density is None:
                    density = np.zeros((grid.steps, *grid.cells))
                density[j] = s.density / grid.tau
        return cls(grid, tuple(atoms), density, ())

    # -- functionals ----------------------------------------------------------

    def mass(self) -> float:
        return float(sum(s.mass() for s in self.slices()))

    def total_variation(self) -> float:
        total = float(np.sum(np.abs([m for _, _, m in self.atoms]))) if self.atoms else 0.0
        if self.density is not None:
            total += float(np.sum(np.abs(self.density))) * self.grid.cell_volume * self.grid.tau
        for omega, profile in self.products:
            total += omega.total_variation() * float(np.sum(profile)) * self.grid.tau
        return total

    def variation_up_to(self, step: int) -> float:
        """Total variation of the measure restricted to the first ``step`` slabs."""
        return float(sum(s.total_variation() for s in self.slices()[:step]))

    def is_nonnegative(self, tol: float = 0.0) -> bool:
        return all(s.is_nonnegative(tol) for s in self.slices())

    def scaled(self, c: float) -> "SpaceTimeMeasure":
        dens = None if self.density is None else self.density * c
        return SpaceTimeMeasure(
            self.grid,
            tuple((loc, t, c * m) for loc, t, m in self.atoms),
            dens,
            tuple((om.scaled(c), pr) for om, pr in self.products),
        )

    def plus(self, other: "SpaceTimeMeasure") -> "SpaceTimeMeasure":
        dens = None
        if self.density is not None or other.density is not None:
            dens = np.zeros((self.grid.steps, *self.grid.cells))
            if self.density is not None:
                dens += self.density
            if other.density is not None:
                dens += other.density
        return SpaceTimeMeasure(
            self.grid, self.atoms + other.atoms, dens, self.products + other.products
        )

    def positive_part(self) -> "SpaceTimeMeasure":
        return SpaceTimeMeasure.from_slices(
            self.grid, [s.positive_part() for s in self.slices()]
        )

    def negative_part(self) -> "SpaceTimeMeasure":
        return SpaceTimeMeasure.from_slices(
            self.grid, [s.negative_part() for s in self.slices()]
        )


# -- constructors -------------------------------------------------------------


def dirac(location, mass: float, grid: Grid | None = None, t: float | None = None,
          dim: int | None = None):
    """Point mass at an interior location; with ``t`` given, a point in Q.

    Without a grid the measure is atoms-only on R^dim (no interiority check),
    for use by the potential-theory operators.
    """
    if grid is None:
        if t is not None:
            raise ValueError("a space-time atom requires a grid")
        if dim is None:
            raise ValueError("gridless dirac requires an explicit dimension")
        return SpatialMeasure(dim, ((_as_point(location, dim), float(mass)),), None, None)
    if t is None:
        return SpatialMeasure(
            grid.dim, ((_as_point(location, grid.dim), float(mass)),), None, grid
        )
    return SpaceTimeMeasure(grid, ((_as_point(location, grid.dim), float(t), float(mass)),))


def product(omega: SpatialMeasure, profile) -> SpaceTimeMeasure:
    """The measure omega (x) F with a per-step nonnegative profile F."""
    if omega.grid is None:
        raise ValueError("product requires a gridded spatial measure")
    profile = np.asarray(profile, dtype=float)
    if profile.ndim == 0:
        profile = np.full(omega.grid.steps, float(profile))
    return SpaceTimeMeasure(omega.grid, (), None, ((omega, profile),))


# -- mollification -------------------------------------------------------------


def _bump_stencil(grid: Grid, radius: float) -> np.ndarray:
    """Polynomial bump (1 - (|x|/r)^2)^2 sampled on cell-center offsets."""
    reach = int(math.ceil(radius / grid.h - 0.5)) + 1
    offs = np.arange(-reach, reach + 1) * grid.h
    if grid.dim == 1:
        rr = np.abs(offs)
    else:
        ox, oy = np.meshgrid(offs, offs, indexing="ij")
        rr = np.hypot(ox, oy)
    w = np.maximum(1.0 - (rr / radius) ** 2, 0.0) ** 2
    return w


def _deposit_atom(grid: Grid, loc: tuple[float, ...], mass: float, radius: float,
                  out: np.ndarray) -> None:
    mesh = grid.centers()
    d2 = np.zeros(grid.cells)
    for k in range(grid.dim):
        d2 += (mesh[k] - loc[k]) ** 2
    w = np.maximum(1.0 - d2 / radius**2, 0.0) ** 2
    total = float(np.sum(w)) * grid.cell_volume
    if total <= 0.0:
        raise ValueError(f"mollifier of radius {radius} misses every cell around {loc}")
    out += (mass / total) * w


def _convolve_density(grid: Grid, density: np.ndarray, radius: float) -> np.ndarray:
    """Mass-preserving bump convolution; clipped mass near the boundary is
    renormalized per source cell so each keeps its full mass."""
    stencil = _bump_stencil(grid, radius)
    ones = np.ones(grid.cells)
    # Per-source normalizer: weight actually landing inside the box.
    denom = ndimage.convolve(ones, stencil, mode="constant", cval=0.0)
    scaled = density / denom
    return ndimage.convolve(scaled, stencil, mode="constant", cval=0.0)


def mollify(mu, n: int):
    """Replace atoms by normalized bump densities of radius max(2h, D/n) and
    convolve densities with the same bump; total mass is preserved and the
    result is a pure density supported in the box."""
    if n < 1:
        raise ValueError(f"mollification level must be >= 1, got {n}")
    if isinstance(mu, SpatialMeasure):
        if mu.grid is None:
            raise ValueError("mollification requires a gridded measure")
        g = mu.grid
        radius = max(2.0 * g.h, g.diameter / n)
        dens = np.zeros(g.cells)
        if mu.density is not None:
            dens += _convolve_density(g, mu.density, radius)
        for loc, m in mu.atoms:
            _deposit_atom(g, loc, m, radius, dens)
        return SpatialMeasure(g.dim, (), dens, g)
    if isinstance(mu, SpaceTimeMeasure):
        g = mu.grid
        radius = max(2.0 * g.h, g.diameter / n)
        dens = np.zeros((g.steps, *g.cells))
        for j, s in enumerate(mu.slices()):
            slab = np.zeros(g.cells)
            if s.density is not None:
                slab += _convolve_density(g, s.density, radius)
            for loc, m in s.atoms:
                _deposit_atom(g, loc, m, radius, slab)
            dens[j] = slab / g.tau
        return SpaceTimeMeasure(g, (), dens, ())
    raise TypeError(f"cannot mollify {type(mu).__name__}")


def atom_smoothed_density(mu, radius: float) -> np.ndarray:
    """Density array with atoms deposited as bumps; explicit densities pass
    through unchanged.  This is the form in which measures enter solvers."""
    if isinstance(mu, SpatialMeasure):
        if mu.grid is None:
            raise ValueError("requires a gridded measure")
        g = mu.grid
        dens = np.zeros(g.cells)
        if mu.density is not None:
            dens += mu.density
        for loc, m in mu.atoms:
            _deposit_atom(g, loc, m, radius, dens)
        return dens
    raise TypeError(f"expected SpatialMeasure, got {type(mu).__name__}")


# -- lattice operations ----------------------------------------------------------


def _inf_spatial(mu: SpatialMeasure, nu: SpatialMeasure) -> SpatialMeasure:
    for m in (mu, nu):
        if not m.is_nonnegative():
            raise ValueError("lattice infimum requires nonnegative measures")
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    grid = mu.grid or nu.grid
    a, b = mu.grouped_atoms(), nu.grouped_atoms()
    atoms = tuple(
        (key, min(a[key], b[key])) for key in sorted(set(a) & set(b)) if min(a[key], b[key]) > 0
    )
    dens = None
    if mu.density is not None or nu.density is not None:
        da = mu.density if mu.density is not None else np.zeros(grid.cells)
        db = nu.density if nu.density is not None else np.zeros(grid.cells)
        dens = np.minimum(da, db)
    return SpatialMeasure(mu.dim, atoms, dens, grid)


def inf_measures(mu, nu):
    """Cellwise/atomwise lattice infimum of nonnegative measures.

    Co-located atoms take the smaller mass; an atom facing only density
    contributes nothing (atoms are singular with respect to densities);
    densities take the pointwise minimum.
    """
    if isinstance(mu, SpatialMeasure) and isinstance(nu, SpatialMeasure):
        return _inf_spatial(mu, nu)
    if isinstance(mu, SpaceTimeMeasure) and isinstance(nu, SpaceTimeMeasure):
        slices = [_inf_spatial(a, b) for a, b in zip(mu.slices(), nu.slices())]
        return SpaceTimeMeasure.from_slices(mu.grid, slices)
    raise TypeError("inf_measures needs two measures of the same kind")


def _leq_spatial(mu: SpatialMeasure, nu: SpatialMeasure, tol: float) -> bool:
    a, b = mu.grouped_atoms(), nu.grouped_atoms()
    for key in set(a) | set(b):
        if a.get(key, 0.0) > b.get(key, 0.0) + tol:
            return False
    da = mu.density if mu.density is not None else 0.0
    db = nu.density if nu.density is not None else 0.0
    return bool(np.all(np.asarray(da) <= np.asarray(db) + tol))


def measure_leq(mu, nu, tol: float = 0.0) -> bool:
    """Partwise ordering mu <= nu (atoms by location, densities cellwise)."""
    if isinstance(mu, SpatialMeasure) and isinstance(nu, SpatialMeasure):
        return _leq_spatial(mu, nu, tol)
    if isinstance(mu, SpaceTimeMeasure) and isinstance(nu, SpaceTimeMeasure):
        return all(
            _leq_spatial(a, b, tol * mu.grid.tau)
            for a, b in zip(mu.slices(), nu.slices())
        )
    raise TypeError("measure_leq needs two measures of the same kind")


# -- truncation and restriction ---------------------------------------------------


def inner_region_mask(grid: Grid, n: int) -> np.ndarray:
    """Space-time mask of the inner region: times in (1/n, T - 1/n) and cells
    farther than 1/n from the lateral boundary; shape (steps, *cells)."""
    margin = 1.0 / n
    tmask = (grid.slab_centers() > margin) & (grid.slab_centers() < grid.T - margin)
    xmask = grid.boundary_distance() > margin
    return tmask.reshape((-1,) + (1,) * grid.dim) & xmask[None, ...]


def truncate_restrict(mu: SpaceTimeMeasure, n: int) -> SpaceTimeMeasure:
    """Clamp the density part to [-n, n] and zero it outside the inner region.

    Applies to pure density data only; atoms or product parts are rejected.
    """
    if n < 1:
        raise ValueError(f"level must be >= 1, got {n}")
    if mu.atoms or mu.products:
        raise ValueError("truncate_restrict applies to density measures only")
    if mu.density is None:
        return SpaceTimeMeasure(mu.grid, (), None, ())
    clipped = np.clip(mu.density, -float(n), float(n))
    clipped[~inner_region_mask(mu.grid, n)] = 0.0
    return SpaceTimeMeasure(mu.grid, (), clipped, ())
