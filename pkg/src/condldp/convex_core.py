"""Convex-analysis substrate on uniform grids.

Functions are represented by :class:`ScalarField`, either as a vectorised
closed-form map or as values tabulated on a :class:`Grid`.  Infinite values
are carried as IEEE ``inf`` (never as a large finite sentinel), so the
"infinite outside the effective domain" branches stay exact.

Conjugation is brute force over the primal grid; that is the normative
definition.  A separable (axis-by-axis) path is available for d >= 2 and is
tested against brute force to 1e-12.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

INF = math.inf
MAX_DIM = 3

# dual points per block in brute-force conjugation (bounds peak memory)
_BLOCK_ELEMS = 4_000_000


class DomainError(ValueError):
    """Raised when a point or a function falls outside an effective domain."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid including both endpoints on every axis."""

    lower: tuple
    upper: tuple
    counts: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        counts = tuple(int(v) for v in np.atleast_1d(self.counts))
        if not (len(lower) == len(upper) == len(counts)):
            raise ValueError("grid bounds and counts must have equal length")
        if not 1 <= len(lower) <= MAX_DIM:
            raise ValueError(f"grid dimension must be 1..{MAX_DIM}, got {len(lower)}")
        for lo, hi, c in zip(lower, upper, counts):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise ValueError(f"grid axis needs finite lower < upper, got [{lo}, {hi}]")
            if c < 2:
                raise ValueError(f"grid axis needs at least 2 points, got {c}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def uniform(cls, lower, upper, count) -> "Grid":
        """Build a grid; scalars give a 1-d grid, a scalar count is broadcast."""
        lower = np.atleast_1d(lower)
        upper = np.atleast_1d(upper)
        counts = np.broadcast_to(np.atleast_1d(count), lower.shape)
        return cls(tuple(lower), tuple(upper), tuple(counts))

    @classmethod
    def through(cls, anchor, step, count, index) -> "Grid":
        """1-d grid with spacing ``step`` whose node ``index`` sits on ``anchor``."""
        lower = anchor - index * step
        return cls((lower,), (lower + (count - 1) * step,), (count,))

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def steps(self) -> np.ndarray:
        return np.array([(hi - lo) / (c - 1) for lo, hi, c in zip(self.lower, self.upper, self.counts)])

    @property
    def step(self) -> float:
        """Largest axis spacing."""
        return float(self.steps.max())

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    def points(self) -> np.ndarray:
        """All grid points, shape (size, dim), in C (lexicographic index) order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def boundary_distance(self) -> np.ndarray:
        """Per-point index distance to the nearest grid face, shape ``self.shape``."""
        dist = None
        for ax, c in enumerate(self.counts):
            idx = np.arange(c)
            d = np.minimum(idx, c - 1 - idx)
            shape = [1] * self.dim
            shape[ax] = c
            d = d.reshape(shape)
            dist = d if dist is None else np.minimum(dist, d)
        return np.broadcast_to(dist, self.shape)

    def nearest_index(self, point) -> tuple:
        point = np.atleast_1d(np.asarray(point, dtype=float))
        idx = np.rint((point - np.array(self.lower)) / self.steps).astype(int)
        return tuple(int(i) for i in np.clip(idx, 0, np.array(self.counts) - 1))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "points": list(self.counts)}


def _as_points(points, dim: int) -> tuple:
    """Normalise input to an (m, dim) array; report whether it was a single point."""
    arr = np.asarray(points, dtype=float)
    if dim == 1 and arr.ndim <= 1:
        single = arr.ndim == 0
        return arr.reshape(-1, 1), single
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"point has dimension {arr.shape[0]}, field expects {dim}")
        return arr.reshape(1, dim), True
    if arr.shape[-1] != dim:
        raise ValueError(f"points have dimension {arr.shape[-1]}, field expects {dim}")
    return arr.reshape(-1, dim), False


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A map R^k -> (-inf, inf], closed-form or tabulated.

    Closed-form ``func`` takes an (m, k) array and returns (m,) values with
    ``inf`` outside the effective domain.  ``grad`` (optional) maps a single
    point of shape (k,) to its gradient.  Tabulated fields store ``values``
    of shape ``grid.shape``; off-grid evaluation is multilinear and returns
    ``inf`` whenever an infinite node carries positive weight.
    """

    dim: int
    func: Optional[Callable] = None
    grad: Optional[Callable] = None
    grid: Optional[Grid] = None
    values: Optional[np.ndarray] = None
    domain: Optional[Callable] = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if (self.func is None) == (self.values is None):
            raise ValueError("ScalarField needs exactly one of func or values")
        if self.values is not None:
            if self.grid is None:
                raise ValueError("tabulated field needs a grid")
            vals = np.asarray(self.values, dtype=float)
            if vals.size != self.grid.size:
                raise ValueError(f"value array has {vals.size} entries, grid has {self.grid.size}")
            if np.isnan(vals).any() or np.isneginf(vals).any():
                raise ValueError("tabulated values must be real or +inf")
            vals = vals.reshape(self.grid.shape)
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)
            if self.grid.dim != self.dim:
                raise ValueError("grid dimension does not match field dimension")

    @classmethod
    def closed_form(cls, dim, func, grad=None, domain=None, **metadata) -> "ScalarField":
        return cls(dim=dim, func=func, grad=grad, domain=domain, metadata=dict(metadata))

    @classmethod
    def tabulated(cls, grid: Grid, values, **metadata) -> "ScalarField":
        return cls(dim=grid.dim, grid=grid, values=values, metadata=dict(metadata))

    @property
    def is_tabulated(self) -> bool:
        return self.values is not None

    def __call__(self, points):
        pts, single = _as_points(points, self.dim)
        if self.func is not None:
            out = np.asarray(self.func(pts), dtype=float).reshape(-1)
            out = np.where(np.isnan(out), INF, out)
        else:
            out = self._interpolate(pts)
        return float(out[0]) if single else out

    def value(self, point) -> float:
        """Value at one point given as a length-dim vector (unambiguous when dim is 1)."""
        return float(self(np.asarray(point, dtype=float).reshape(1, self.dim))[0])

    def _interpolate(self, pts: np.ndarray) -> np.ndarray:
        grid = self.grid
        lower = np.array(grid.lower)
        upper = np.array(grid.upper)
        counts = np.array(grid.counts)
        outside = np.any((pts < lower - 1e-12 * grid.steps) | (pts > upper + 1e-12 * grid.steps), axis=1)
        t = (np.clip(pts, lower, upper) - lower) / grid.steps
        base = np.clip(np.floor(t).astype(int), 0, counts - 2)
        frac = t - base
        out = np.zeros(len(pts))
        hit_inf = np.zeros(len(pts), dtype=bool)
        for corner in itertools.product((0, 1), repeat=self.dim):
            corner = np.array(corner)
            w = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
            v = self.values[tuple((base + corner).T)]
            hit_inf |= np.isinf(v) & (w > 0)
            out += w * np.where(np.isinf(v), 0.0, v)
        out[hit_inf | outside] = INF
        return out

    def on_grid(self, grid: Grid) -> np.ndarray:
        """Values at every point of ``grid``, shaped ``grid.shape``."""
        if self.is_tabulated and grid == self.grid:
            return np.array(self.values)
        return np.asarray(self(grid.points()), dtype=float).reshape(grid.shape)

    def in_domain(self, points) -> np.ndarray:
        pts, single = _as_points(points, self.dim)
        if self.domain is not None:
            mask = np.asarray(self.domain(pts), dtype=bool).reshape(-1)
        else:
            mask = np.isfinite(np.atleast_1d(self(pts)))
        return bool(mask[0]) if single else mask


@dataclass(frozen=True, eq=False)
class ConjugatePair:
    primal: ScalarField
    dual: ScalarField
    dual_grid: Grid
    defect: float


def conjugate(f: ScalarField, primal_grid: Grid, dual_grid: Grid, method: str = "brute") -> ScalarField:
    """Grid Legendre-Fenchel transform g(x) = max_lambda [lambda.x - f(lambda)].

    The result is tabulated on ``dual_grid``.  Dual points whose maximiser
    sits on the primal grid boundary are listed in
    ``metadata["boundary_argmax"]``: there the true supremum may exceed the
    grid value (or diverge).
    """
    if f.dim != primal_grid.dim or primal_grid.dim != dual_grid.dim:
        raise ValueError(
            f"dimension mismatch: field {f.dim}, primal grid {primal_grid.dim}, dual grid {dual_grid.dim}"
        )
    fvals = f.on_grid(primal_grid)
    finite = np.isfinite(fvals)
    if not finite.any():
        raise DomainError("empty effective domain: f is infinite at every primal grid point")

    if method == "separable" and primal_grid.dim > 1:
        g, on_edge = _conjugate_separable(fvals, primal_grid, dual_grid)
    elif method in ("brute", "separable"):
        g, on_edge = _conjugate_brute(fvals, primal_grid, dual_grid)
    else:
        raise ValueError(f"unknown conjugation method {method!r}")

    return ScalarField.tabulated(
        dual_grid,
        g.reshape(dual_grid.shape),
        primal_grid=primal_grid,
        boundary_argmax=on_edge.reshape(dual_grid.shape),
        note="grid supremum; true value may be larger where boundary_argmax is set",
    )


def _conjugate_brute(fvals, primal_grid, dual_grid):
    lam = primal_grid.points()
    fv = fvals.ravel()
    keep = np.isfinite(fv)
    lam_k, fv_k = lam[keep], fv[keep]
    edge = (primal_grid.boundary_distance().ravel() == 0)[keep]
    x = dual_grid.points()
    g = np.empty(len(x))
    on_edge = np.empty(len(x), dtype=bool)
    block = max(1, _BLOCK_ELEMS // len(lam_k))
    for start in range(0, len(x), block):
        xs = x[start : start + block]
        s = xs @ lam_k.T - fv_k
        idx = np.argmax(s, axis=1)
        g[start : start + block] = s[np.arange(len(xs)), idx]
        on_edge[start : start + block] = edge[idx]
    return g, on_edge


def _conjugate_separable(fvals, primal_grid, dual_grid):
    # sup over a product grid is an iterated sup, one axis at a time
    work = np.where(np.isfinite(fvals), -fvals, -INF)
    edge = np.zeros(work.shape, dtype=bool)
    for ax in range(primal_grid.dim):
        lam = primal_grid.axes[ax]
        x = dual_grid.axes[ax]
        moved = np.moveaxis(work, ax, -1)
        moved_edge = np.moveaxis(edge, ax, -1)
        # s[..., j, i] = x_j * lam_i + work[..., i]
        s = x[:, None] * lam[None, :] + moved[..., None, :]
        idx = np.argmax(s, axis=-1)
        best = np.take_along_axis(s, idx[..., None], axis=-1)[..., 0]
        lam_edge = (idx == 0) | (idx == len(lam) - 1)
        prev_edge = np.take_along_axis(np.broadcast_to(moved_edge[..., None, :], s.shape), idx[..., None], axis=-1)[..., 0]
        work = np.moveaxis(best, -1, ax)
        edge = np.moveaxis(lam_edge | prev_edge, -1, ax)
    return work.ravel(), edge.ravel()


def conjugate_pair(f: ScalarField, primal_grid: Grid, dual_grid: Grid) -> ConjugatePair:
    g = conjugate(f, primal_grid, dual_grid)
    return ConjugatePair(f, g, dual_grid, fenchel_young_defect(f, g, primal_grid, dual_grid))


def fenchel_young_defect(primal: ScalarField, dual: ScalarField, primal_grid: Grid, dual_grid: Grid) -> float:
    """max over grid pairs of [lambda.x - primal(lambda) - dual(x)], clipped at 0."""
    lam = primal_grid.points()
    fv = primal.on_grid(primal_grid).ravel()
    x = dual_grid.points()
    gv = dual.on_grid(dual_grid).ravel()
    lam, fv = lam[np.isfinite(fv)], fv[np.isfinite(fv)]
    x, gv = x[np.isfinite(gv)], gv[np.isfinite(gv)]
    if len(lam) == 0 or len(x) == 0:
        return 0.0
    worst = -INF
    block = max(1, _BLOCK_ELEMS // len(lam))
    for start in range(0, len(x), block):
        s = x[start : start + block] @ lam.T - fv[None, :] - gv[start : start + block, None]
        worst = max(worst, float(s.max()))
    return max(worst, 0.0)


def default_step(point) -> np.ndarray:
    return 1e-5 * (1.0 + np.abs(np.asarray(point, dtype=float)))


def gradient(f: ScalarField, point, step=None) -> np.ndarray:
    """Analytic gradient when the field carries one, else central differences."""
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.shape != (f.dim,):
        raise ValueError(f"point has shape {p.shape}, field expects ({f.dim},)")
    if f.grad is not None:
        if not f.in_domain(p):
            raise DomainError(f"point {p.tolist()} outside effective domain")
        g = np.atleast_1d(np.asarray(f.grad(p), dtype=float))
        if not np.all(np.isfinite(g)):
            raise DomainError(f"gradient not finite at {p.tolist()}")
        return g
    h = default_step(p) if step is None else np.broadcast_to(np.asarray(step, dtype=float), p.shape)
    shifts = np.eye(f.dim) * h
    probes = np.concatenate([p + shifts, p - shifts, p[None, :]])
    vals = np.atleast_1d(f(probes))
    if not np.all(np.isfinite(vals)):
        raise DomainError(f"point {p.tolist()} outside effective domain (or too close to its edge)")
    return (vals[: f.dim] - vals[f.dim : 2 * f.dim]) / (2.0 * h)


def hessian_fd(f: ScalarField, point, step=None) -> np.ndarray:
    """Jacobian of the gradient by central differences (symmetrised)."""
    p = np.atleast_1d(np.asarray(point, dtype=float))
    h = default_step(p) * 10 if step is None else np.broadcast_to(np.asarray(step, dtype=float), p.shape)
    cols = []
    for i in range(f.dim):
        e = np.zeros(f.dim)
        e[i] = h[i]
        cols.append((gradient(f, p + e) - gradient(f, p - e)) / (2 * h[i]))
    jac = np.stack(cols, axis=1)
    return 0.5 * (jac + jac.T)


def infimum_over(f: ScalarField, region, grid: Grid, mode: str = "raw"):
    """Minimum of ``f`` over grid points in ``region`` (raw, interior or closure).

    ``region`` is anything with a ``grid_mask(grid, mode)`` method.  Returns
    ``(inf, None)`` when no grid point qualifies; ties go to the smallest
    lexicographic grid index.
    """
    vals = f.on_grid(grid)
    mask = np.asarray(region.grid_mask(grid, mode), dtype=bool) & np.isfinite(vals)
    if not mask.any():
        return INF, None
    masked = np.where(mask, vals, INF).ravel()
    k = int(np.argmin(masked))
    return float(masked[k]), grid.points()[k]


def biconjugate_defect(f: ScalarField, primal_grid: Grid, dual_grid: Grid) -> float:
    """Sup-norm of f - f** on primal points at least 2 steps from the boundary."""
    g = conjugate(f, primal_grid, dual_grid)
    h = conjugate(g, dual_grid, primal_grid)
    fv = f.on_grid(primal_grid)
    hv = h.values
    keep = (primal_grid.boundary_distance() >= 2) & np.isfinite(fv) & np.isfinite(hv)
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(fv - hv)[keep]))


def convexity_violations(f: ScalarField, grid: Grid, tol: float = 1e-8) -> list:
    """Interior grid points with a negative axis second difference.

    ``tol`` is relative to the value scale max(1, max |f|) over finite entries.
    Returns a list of ``(point, magnitude)`` pairs.
    """
    vals = f.on_grid(grid)
    finite = vals[np.isfinite(vals)]
    scale = max(1.0, float(np.abs(finite).max())) if finite.size else 1.0
    worst = np.zeros(grid.shape)
    for ax in range(grid.dim):
        v = np.moveaxis(vals, ax, 0)
        d2 = np.full(v.shape, np.nan)
        with np.errstate(invalid="ignore"):
            d2[1:-1] = v[2:] - 2 * v[1:-1] + v[:-2]
        d2 = np.where(np.isfinite(d2), d2, 0.0)
        worst = np.minimum(worst, np.moveaxis(d2, 0, ax))
    bad = worst < -tol * scale
    pts = grid.points()
    flat = bad.ravel()
    return [(pts[i], float(-worst.ravel()[i])) for i in np.flatnonzero(flat)]


def lipschitz_estimate(vals: np.ndarray, grid: Grid, mask: Optional[np.ndarray] = None) -> float:
    """Largest finite-difference gradient norm over grid cells touching ``mask``."""
    sq = np.zeros(grid.shape)
    for ax, h in enumerate(grid.steps):
        v = np.moveaxis(vals, ax, 0)
        d = np.zeros(v.shape)
        with np.errstate(invalid="ignore"):
            diff = np.abs(np.diff(v, axis=0)) / h
        diff = np.where(np.isfinite(diff), diff, 0.0)
        d[:-1] = np.maximum(d[:-1], diff)
        d[1:] = np.maximum(d[1:], diff)
        sq += np.moveaxis(d, 0, ax) ** 2
    norm = np.sqrt(sq)
    if mask is not None:
        norm = np.where(mask, norm, 0.0)
    return float(norm.max())


def as_vector(v: Sequence | float | None, dim: int) -> np.ndarray:
    arr = np.zeros(dim) if v is None else np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (dim,):
        raise ValueError(f"expected a vector of length {dim}, got shape {arr.shape}")
    return arr
