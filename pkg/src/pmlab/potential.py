"""Nonlinear potential theory: Wolff potentials, fractional maximal
operators, Bessel capacities, critical exponents, and exponential
integrability quadrature.

Radial integrals use log-spaced nodes augmented with the exact radii at
which the ball-mass profile of a grid measure jumps (atom distances), so
pure-atom potentials are computed to round-off regardless of node count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .grid import Field, Grid
from .measures import SpatialMeasure

__all__ = [
    "ExponentReport",
    "exponents",
    "wolff",
    "wolff_field",
    "maximal",
    "maximal_field",
    "maximal_sup_norm",
    "h_eta",
    "subcritical_check",
    "delta0",
    "exp_integrability",
    "capacity_upper",
    "bessel_kernel",
    "dirac_admissible",
    "unit_ball_volume",
]

# Guard for exp() arguments; anything above signals divergence.
_EXP_CAP = 700.0


def unit_ball_volume(dim: int) -> float:
    return math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)


@dataclass(frozen=True)
class ExponentReport:
    N: int
    p: float
    p_1: float
    p_c: float
    p_e: float
    p_above_p1: bool
    p_below_N: bool


def exponents(N: int, p: float) -> ExponentReport:
    """Critical exponents p_c = p - 1 + p/N, p_e = N(p-1)/(N-p), and the
    integrability threshold p_1 = (2N+1)/(N+1)."""
    if p <= 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if N < 1 or int(N) != N:
        raise ValueError(f"N must be a positive integer, got {N}")
    N = int(N)
    p_1 = (2 * N + 1) / (N + 1)
    p_c = p - 1 + p / N
    p_e = N * (p - 1) / (N - p) if p < N else math.inf
    return ExponentReport(
        N=N, p=p, p_1=p_1, p_c=p_c, p_e=p_e, p_above_p1=p > p_1, p_below_N=p < N
    )


# -- ball-mass profiles -------------------------------------------------------


def _profile(omega: SpatialMeasure, x: Sequence[float], dim: int):
    """Sorted distances and cumulative masses of the measure around x.

    The ball mass omega(B(x, r)) is the cumulative mass over entries with
    distance < r; atoms contribute at their exact distance, density cells at
    their center distance with mass value * h^N.
    """
    x = np.asarray(x, dtype=float)
    dists = []
    masses = []
    if omega.atoms:
        locs = np.array([loc for loc, _ in omega.atoms])
        dists.append(np.linalg.norm(locs - x, axis=1))
        masses.append(np.array([m for _, m in omega.atoms]))
    if omega.density is not None:
        pts = omega.grid.center_points()
        dists.append(np.linalg.norm(pts - x, axis=1))
        masses.append(omega.density.ravel() * omega.grid.cell_volume)
    if not dists:
        return np.zeros(0), np.zeros(0)
    d = np.concatenate(dists)
    m = np.concatenate(masses)
    order = np.argsort(d)
    return d[order], np.cumsum(m[order])


def _ball_mass(d: np.ndarray, cum: np.ndarray, r, open_ball: bool = True) -> np.ndarray:
    side = "left" if open_ball else "right"
    idx = np.searchsorted(d, r, side=side)
    return np.where(idx > 0, cum[np.maximum(idx, 1) - 1], 0.0)


def _check_nonneg(omega: SpatialMeasure) -> None:
    if not omega.is_nonnegative():
        raise ValueError("operator requires a nonnegative measure")


def _resolve_geometry(omega: SpatialMeasure, dim, r_min):
    if dim is None:
        dim = omega.dim
    elif omega.density is not None and dim != omega.dim:
        raise ValueError("cannot override the dimension of a gridded density")
    if r_min is None:
        if omega.grid is None:
            raise ValueError("gridless measure needs an explicit r_min")
        r_min = omega.grid.h / 4.0
    if r_min <= 0:
        raise ValueError(f"r_min must be positive, got {r_min}")
    return int(dim), float(r_min)


def _radii(r_min: float, R: float, nodes: int, jumps: np.ndarray) -> np.ndarray:
    base = np.geomspace(r_min, R, max(int(nodes), 2))
    inside = jumps[(jumps > r_min) & (jumps < R)]
    return np.unique(np.concatenate([base, inside]))


def wolff(
    omega: SpatialMeasure,
    p: float,
    R: float,
    x: Sequence[float] | float,
    nodes: int = 64,
    r_min: float | None = None,
    dim: int | None = None,
) -> float:
    """Truncated Wolff potential: the radial integral of
    (r^{p-N} omega(B(x,r)))^{1/(p-1)} dr/r over r in [r_min, R].

    The r-power is integrated exactly on each sub-interval; the ball mass is
    sampled at the geometric midpoint, which is exact between profile jumps.
    """
    _check_nonneg(omega)
    if p <= 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if R <= 0:
        raise ValueError(f"R must be positive, got {R}")
    dim, r_min = _resolve_geometry(omega, dim, r_min)
    if np.isscalar(x):
        x = (float(x),)
    d, cum = _profile(omega, x, dim)
    if d.size == 0 or R <= r_min:
        return 0.0
    r = _radii(r_min, R, nodes, d)
    mids = np.sqrt(r[:-1] * r[1:])
    m = _ball_mass(d, cum, mids)
    a = (p - dim) / (p - 1.0)
    if abs(a) > 1e-14:
        weights = (r[1:] ** a - r[:-1] ** a) / a
    else:
        weights = np.log(r[1:] / r[:-1])
    return float(np.sum(np.where(m > 0, m, 0.0) ** (1.0 / (p - 1.0)) * weights))


def wolff_field(
    omega: SpatialMeasure,
    p: float,
    R: float,
    grid: Grid | None = None,
    nodes: int = 64,
    r_min: float | None = None,
) -> Field:
    """Wolff potential sampled at every cell center."""
    grid = grid or omega.grid
    if grid is None:
        raise ValueError("wolff_field needs a grid")
    pts = grid.center_points()
    vals = np.array([wolff(omega, p, R, pt, nodes=nodes, r_min=r_min) for pt in pts])
    return Field(grid, vals.reshape(grid.cells))


def h_eta(r, eta: float):
    """inf((-ln r)^{-eta}, (ln 2)^{-eta}); constant (ln 2)^{-eta} for r >= 1/2."""
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    r = np.asarray(r, dtype=float)
    if eta == 0:
        return np.ones_like(r)
    small = r < 0.5
    out = np.full_like(r, math.log(2.0) ** (-eta))
    out[small] = (-np.log(r[small])) ** (-eta)
    return out


def maximal(
    omega: SpatialMeasure,
    p: float,
    R: float,
    eta: float,
    x: Sequence[float] | float,
    nodes: int = 64,
    r_min: float | None = None,
    dim: int | None = None,
) -> float:
    """Fractional maximal function: sup over r in [r_min, R) of
    omega(B(x,r)) / (r^{N-p} h_eta(r)).

    Radii are the log-spaced nodes plus the profile jump radii, with the
    ball mass taken just past each jump (the supremum over the open interval
    to the right).
    """
    _check_nonneg(omega)
    if R <= 0:
        raise ValueError(f"R must be positive, got {R}")
    dim, r_min = _resolve_geometry(omega, dim, r_min)
    if np.isscalar(x):
        x = (float(x),)
    d, cum = _profile(omega, x, dim)
    if d.size == 0 or R <= r_min:
        return 0.0
    r = _radii(r_min, R, nodes, d)
    m = _ball_mass(d, cum, r, open_ball=False)
    vals = m / (r ** (dim - p) * h_eta(r, eta))
    return float(np.max(vals))


def maximal_field(
    omega: SpatialMeasure,
    p: float,
    R: float,
    eta: float,
    grid: Grid | None = None,
    nodes: int = 64,
    r_min: float | None = None,
) -> Field:
    grid = grid or omega.grid
    if grid is None:
        raise ValueError("maximal_field needs a grid")
    pts = grid.center_points()
    vals = np.array([maximal(omega, p, R, eta, pt, nodes=nodes, r_min=r_min) for pt in pts])
    return Field(grid, vals.reshape(grid.cells))


def maximal_sup_norm(omega: SpatialMeasure, p: float, R: float, eta: float,
                     grid: Grid | None = None, nodes: int = 64) -> float:
    """Sup of the maximal function over the grid cell centers."""
    return float(np.max(maximal_field(omega, p, R, eta, grid, nodes=nodes).values))


# -- subcriticality and constants ------------------------------------------------


def subcritical_check(g_spec, N: int, p: float) -> bool:
    """Whether the absorption/source growth integral converges: power
    nonlinearities need q < p_c; exponential families never do."""
    kind = getattr(g_spec, "kind", g_spec)
    if kind == "power":
        return float(g_spec.q) < exponents(N, p).p_c
    if kind in ("exponential", "truncated_exp"):
        return False
    raise ValueError(f"unknown nonlinearity kind {kind!r}")


def delta0(p: float, beta: float) -> float:
    """The exponential-integrability threshold ((12 beta)^-1)^beta * p * ln 2."""
    if beta <= 1:
        raise ValueError(f"beta must exceed 1, got {beta}")
    if p <= 1:
        raise ValueError(f"p must exceed 1, got {p}")
    return (1.0 / (12.0 * beta)) ** beta * p * math.log(2.0)


def exp_integrability(
    omega: SpatialMeasure,
    p: float,
    beta: float,
    delta: float,
    grid: Grid | None = None,
    nodes: int = 64,
) -> tuple[bool, float]:
    """Grid quadrature of exp(delta W^beta / ||M||^{beta/(p-1)}) over the box.

    W is the Wolff potential truncated at 2 * diameter and M the fractional
    maximal function with exponent (p-1)/beta'.  Returns (finite, value);
    finite is False when any cell integrand exceeds the overflow guard.
    """
    grid = grid or omega.grid
    if grid is None:
        raise ValueError("exp_integrability needs a grid")
    d0 = delta0(p, beta)
    if not 0.0 < delta < d0:
        raise ValueError(f"delta must lie in (0, {d0}), got {delta}")
    R = 2.0 * grid.diameter
    eta = (p - 1.0) * (beta - 1.0) / beta  # (p-1)/beta'
    norm = maximal_sup_norm(omega, p, R, eta, grid, nodes=nodes)
    if norm <= 0.0:
        raise ValueError("maximal-function norm vanishes; integrand is degenerate")
    w = wolff_field(omega, p, R, grid, nodes=nodes).values
    arg = delta * w**beta / norm ** (beta / (p - 1.0))
    if np.any(arg > _EXP_CAP):
        return False, math.inf
    value = float(np.sum(np.exp(arg)) * grid.cell_volume)
    return True, value


# -- Bessel capacity ---------------------------------------------------------------


def bessel_kernel(r, alpha: float, dim: int):
    """Bessel kernel of order alpha on R^dim, normalized so that for
    alpha = 2, dim = 3 it equals exp(-r)/(4 pi r)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("kernel evaluated at nonpositive radius")
    nu = (dim - alpha) / 2.0
    coeff = 2.0 * (2.0 * math.pi) ** ((alpha - dim) / 2.0) / (
        (4.0 * math.pi) ** (alpha / 2.0) * math.gamma(alpha / 2.0)
    )
    return coeff * r ** ((alpha - dim) / 2.0) * special.kv(nu, r)


def capacity_upper(
    balls: Sequence[tuple[Sequence[float] | float, float]],
    alpha: float,
    s: float,
    grid: Grid,
) -> float:
    """Upper bound on the Bessel capacity of a finite union of balls.

    For each ball B(c, rho) the test density is the uniform bump
    chi_B / (|B| G_alpha(2 rho)); its potential is at least G_alpha(2 rho)
    times the kernel-mass ratio, hence >= 1 on the ball, and summing over
    balls keeps admissibility.  The bound is the grid L^s norm of the summed
    density, raised to s.  Points are given radius 2h.
    """
    if s <= 1:
        raise ValueError(f"s must exceed 1, got {s}")
    if not balls:
        return 0.0
    mesh = grid.centers()
    phi = np.zeros(grid.cells)
    vol_unit = unit_ball_volume(grid.dim)
    for center, rho in balls:
        c = (float(center),) if np.isscalar(center) else tuple(float(v) for v in center)
        if len(c) != grid.dim:
            raise ValueError(f"ball center {c} has wrong dimension")
        if not grid.is_interior(c):
            raise ValueError(f"ball center {c} lies outside the box")
        rho = float(rho)
        if rho <= 0.0:
            rho = 2.0 * grid.h
        d2 = np.zeros(grid.cells)
        for k in range(grid.dim):
            d2 += (mesh[k] - c[k]) ** 2
        inside = d2 < rho**2
        scale = 1.0 / (vol_unit * rho**grid.dim * bessel_kernel(2.0 * rho, alpha, grid.dim))
        phi += scale * inside
    return float(np.sum(phi**s) * grid.cell_volume)


def dirac_admissible(N: int, p: float, q: float) -> bool:
    """Whether a point mass is admissible datum for the power absorption
    problem: p * q / (q + 1 - p) > N, equivalently q < p_e."""
    if q <= p - 1:
        raise ValueError(f"need q > p - 1, got q={q}, p={p}")
    if p >= N:
        raise ValueError(f"need p < N, got p={p}, N={N}")
    return p * q / (q + 1.0 - p) > N
