"""Conditioning sets, tilt solving and the conditional rate constructions.

Points live in R^(d+d') as (x, y); a half-space or shell constrains only the
x block through its normal lambda0.  On a grid, the interior of a set is the
set of strict members whose 2k axis neighbours are all members, and the
closure uses non-strict inequalities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .convex_core import (
    INF,
    DomainError,
    Grid,
    ScalarField,
    as_vector,
    conjugate,
    gradient,
    hessian_fd,
    infimum_over,
    lipschitz_estimate,
)

MODES = ("raw", "interior", "closure")


class SolverError(RuntimeError):
    def __init__(self, message: str, best_residual: float = INF, best_lambda=None):
        super().__init__(f"{message} (best residual {best_residual:.3e})")
        self.best_residual = best_residual
        self.best_lambda = best_lambda


class EmptySetError(ValueError):
    pass


def _shift(mask: np.ndarray, ax: int, by: int, fill: bool = False) -> np.ndarray:
    """mask shifted along ``ax``; cells shifted in from outside the grid take ``fill``."""
    out = np.full_like(mask, fill)
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if by > 0:
        src[ax], dst[ax] = slice(None, -by), slice(by, None)
    else:
        src[ax], dst[ax] = slice(-by, None), slice(None, by)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def erode(mask: np.ndarray, outside: bool = False) -> np.ndarray:
    """Keep cells whose axis neighbours are all set; ``outside`` stands in for off-grid neighbours."""
    out = mask.copy()
    for ax in range(mask.ndim):
        out &= _shift(mask, ax, 1, outside) & _shift(mask, ax, -1, outside)
    return out


def dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for ax in range(mask.ndim):
        out |= _shift(mask, ax, 1) | _shift(mask, ax, -1)
    return out


@dataclass(frozen=True, eq=False)
class ConditioningSet:
    """Half-space, thickened shell, or grid predicate, intersected with a domain.

    ``domain`` is a predicate on (m, dim) point arrays (typically the
    effective domain of the rate function); ``None`` means everywhere.
    """

    kind: str
    normal: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None
    delta: Optional[float] = None
    domain: Optional[Callable] = None
    grid: Optional[Grid] = None
    mask: Optional[np.ndarray] = None
    degenerate: bool = False

    @classmethod
    def half_space(cls, normal, anchor, domain=None) -> "ConditioningSet":
        normal = np.atleast_1d(np.asarray(normal, dtype=float))
        anchor = as_vector(anchor, len(normal))
        return cls("halfspace", normal, anchor, domain=domain, degenerate=not np.any(normal))

    @classmethod
    def shell(cls, normal, anchor, delta, domain=None) -> "ConditioningSet":
        if delta < 0:
            raise ValueError("shell thickness must be non-negative")
        normal = np.atleast_1d(np.asarray(normal, dtype=float))
        anchor = as_vector(anchor, len(normal))
        return cls("shell", normal, anchor, float(delta), domain=domain, degenerate=not np.any(normal))

    @classmethod
    def from_mask(cls, grid: Grid, mask) -> "ConditioningSet":
        mask = np.asarray(mask, dtype=bool).reshape(grid.shape)
        return cls("grid", grid=grid, mask=mask)

    @classmethod
    def everything(cls, d: int = 1) -> "ConditioningSet":
        return cls.half_space(np.zeros(d), np.zeros(d))

    @property
    def d(self) -> int:
        return len(self.normal) if self.normal is not None else self.grid.dim

    def _tol(self) -> float:
        return 1e-12 * (1.0 + float(np.abs(self.normal).sum() * (1.0 + np.abs(self.anchor).max())))

    def offset(self, points) -> np.ndarray:
        """lambda0 . (x - x0) for each point, x being the first d coordinates."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts[:, : self.d] - self.anchor) @ self.normal

    def contains(self, points, mode: str = "raw") -> np.ndarray:
        """Pointwise membership; ``interior`` here is the strict-inequality test."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "grid":
            idx = [self.grid.nearest_index(p) for p in pts]
            return np.array([bool(self.mask[i]) for i in idx], dtype=bool)
        v = self.offset(pts)
        tol = self._tol()
        if self.degenerate:
            member = np.ones(len(pts), dtype=bool)
        elif mode == "interior":
            member = v > tol
            if self.kind == "shell":
                member &= v < self.delta - tol
        else:
            member = v >= -tol
            if self.kind == "shell":
                member &= (v <= self.delta + tol) if mode == "closure" else (v < self.delta - tol)
        if self.domain is not None:
            member &= np.asarray(self.domain(pts), dtype=bool)
        return member

    def grid_mask(self, grid: Grid, mode: str = "raw") -> np.ndarray:
        if self.kind == "grid":
            if grid != self.grid:
                raise ValueError("grid predicate queried on a different grid")
            raw = self.mask
            return erode(raw) if mode == "interior" else raw.copy()
        # analytic sets know their open interior exactly: strict membership
        return self.contains(grid.points(), mode).reshape(grid.shape)

    def describe(self) -> dict:
        if self.kind == "grid":
            return {"kind": "grid", "members": int(self.mask.sum())}
        out = {"kind": self.kind, "normal": self.normal.tolist(), "anchor": self.anchor.tolist()}
        if self.kind == "shell":
            out["delta"] = self.delta
        if self.degenerate:
            out["degenerate"] = True
        return out


def build_conditioning_set(lambda0, x0, delta=None, domain=None) -> ConditioningSet:
    """The set {lambda0 . (x - x0) >= 0}, or the shell [0, delta) when delta is given.

    A zero normal is allowed; the result is then the whole domain and carries
    ``degenerate=True``.
    """
    if delta is None:
        return ConditioningSet.half_space(lambda0, x0, domain)
    if not delta > 0:
        raise ValueError(f"shell thickness delta must be positive, got {delta}")
    return ConditioningSet.shell(lambda0, x0, delta, domain)


@dataclass(frozen=True)
class TiltSolution:
    x0: np.ndarray
    lambda0: np.ndarray
    y0: np.ndarray
    min_rate: float
    residual: float
    iterations: int
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "x0": self.x0.tolist(),
            "lambda0": self.lambda0.tolist(),
            "y0": self.y0.tolist(),
            "min_rate": self.min_rate,
            "residual": self.residual,
            "iterations": self.iterations,
            "flags": list(self.flags),
        }


def _tilt_gradient(psi: ScalarField, lam: np.ndarray, d_prime: int) -> np.ndarray:
    return gradient(psi, np.concatenate([lam, np.zeros(d_prime)]))


def solve_tilt(psi: ScalarField, x0, tol: float = 1e-10, max_iter: int = 100) -> TiltSolution:
    """Find lambda0 with grad_1 Psi(lambda0, 0) = x0.

    Damped Newton from lambda = 0.  In one dimension the iterate is kept
    inside a bracket grown geometrically from 0 and falls back to bisection
    whenever Newton leaves it.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x0)
    d_prime = psi.dim - d
    if d_prime < 0:
        raise ValueError(f"x0 has dimension {d} but Psi lives on R^{psi.dim}")

    def resid(lam):
        return _tilt_gradient(psi, lam, d_prime)[:d] - x0

    if d == 1:
        lam, iters, flags = _solve_1d(resid, tol, max_iter)
    else:
        lam, iters, flags = _solve_newton(psi, resid, d, d_prime, tol, max_iter)

    full = np.concatenate([lam, np.zeros(d_prime)])
    grad = gradient(psi, full)
    residual = float(np.max(np.abs(grad[:d] - x0)))
    min_rate = float(lam @ x0 - psi.value(full))
    if -1e-12 < min_rate < 0:
        min_rate = 0.0
    return TiltSolution(x0, lam, grad[d:], min_rate, residual, iters, tuple(flags))


_FLAT_SLOPE = 1e-12


def _fd_slope(g, t):
    h = 1e-6 * (1 + abs(t))
    try:
        return (g(t + h) - g(t - h)) / (2 * h)
    except DomainError:
        return 0.0


def _solve_1d(resid, tol, max_iter):
    flags = []

    def g(t):
        return float(resid(np.array([t]))[0])

    g0 = g(0.0)
    if abs(g0) <= tol:
        return np.zeros(1), 0, flags
    direction = 1.0 if g0 < 0 else -1.0
    lo, glo = 0.0, g0
    step = 1.0
    hi = None
    best = (abs(g0), 0.0)
    for _ in range(80):
        t = direction * step
        try:
            gt = g(t)
        except DomainError:
            break
        best = min(best, (abs(gt), t))
        if abs(gt) <= tol:
            # a saturated gradient only approaches x0 asymptotically
            if _fd_slope(g, t) <= _FLAT_SLOPE:
                break
            return np.array([t]), 0, flags
        if np.sign(gt) != np.sign(g0):
            hi, ghi = t, gt
            break
        if abs(gt) > abs(glo) + 1e-15:
            flags.append("non-monotone gradient")
        lo, glo = t, gt
        step *= 2.0
    if hi is None:
        raise SolverError("x0 outside gradient range or solver stall", best[0], np.array([best[1]]))

    a, b = (lo, hi) if lo < hi else (hi, lo)
    ga, gb = (glo, ghi) if lo < hi else (ghi, glo)
    if ga > 0 > gb:
        flags.append("non-monotone gradient")
    # Newton starts from the bracket end reached from lambda = 0
    t = lo
    for it in range(1, max_iter + 1):
        gt = g(t)
        best = min(best, (abs(gt), t))
        if abs(gt) <= tol:
            return np.array([t]), it, flags
        if (gt < 0) == (ga < 0):
            a, ga = t, gt
        else:
            b, gb = t, gt
        slope = _fd_slope(g, t)
        newton = t - gt / slope if slope > 0 else None
        t = newton if newton is not None and a < newton < b else 0.5 * (a + b)
        if b - a < 1e-15 * (1 + abs(t)):
            break
    raise SolverError("x0 outside gradient range or solver stall", best[0], np.array([best[1]]))


def _solve_newton(psi, resid, d, d_prime, tol, max_iter):
    lam = np.zeros(d)
    r = resid(lam)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return lam, it - 1, []
        jac = hessian_fd(psi, np.concatenate([lam, np.zeros(d_prime)]))[:d, :d]
        step = np.linalg.solve(jac, -r)
        scale = 1.0
        for _ in range(40):
            trial = lam + scale * step
            try:
                rt = resid(trial)
            except DomainError:
                rt = None
            if rt is not None and np.linalg.norm(rt) < np.linalg.norm(r):
                break
            scale *= 0.5
        else:
            raise SolverError("x0 outside gradient range or solver stall", float(np.max(np.abs(r))), lam)
        lam, r = trial, rt
    if np.max(np.abs(r)) <= tol:
        return lam, max_iter, []
    raise SolverError("x0 outside gradient range or solver stall", float(np.max(np.abs(r))), lam)


@dataclass(frozen=True)
class SetInfimum:
    value: float
    argmin: Optional[np.ndarray]
    analytic: Optional[float] = None
    tolerance: Optional[float] = None

    @property
    def gap(self) -> Optional[float]:
        if self.analytic is None:
            return None
        return abs(self.value - self.analytic)

    @property
    def agrees(self) -> Optional[bool]:
        if self.analytic is None:
            return None
        return self.gap <= self.tolerance


def inf_rate_on_set(rate: ScalarField, B: ConditioningSet, grid: Grid, tilt: TiltSolution | None = None,
                    tolerance: float | None = None) -> SetInfimum:
    """Grid infimum of the rate over B, optionally compared with the analytic value.

    A disagreement with ``tilt.min_rate`` beyond ``tolerance`` is reported in
    the result (``agrees`` is False); it is never averaged away.  The default
    tolerance is the grid step times a local Lipschitz estimate, which bounds
    the error of landing on the first grid node inside B.
    """
    mask = B.grid_mask(grid, "raw")
    if not mask.any():
        raise EmptySetError("empty conditioning set on grid")
    value, argmin = infimum_over(rate, B, grid, "raw")
    if tilt is None:
        return SetInfimum(value, argmin)
    if tolerance is None:
        vals = rate.on_grid(grid)
        near = np.zeros(grid.shape, dtype=bool)
        if argmin is not None:
            near[grid.nearest_index(argmin)] = True
            near = dilate(dilate(near))
        tolerance = grid.step * lipschitz_estimate(vals, grid, near) + 1e-12
    return SetInfimum(value, argmin, tilt.min_rate, tolerance)


@dataclass(frozen=True, eq=False)
class ConditionalRate:
    """I_B: the base rate shifted by inf I(B) on closure(B), infinite elsewhere."""

    base: ScalarField
    offset: float
    support: ConditioningSet

    def __call__(self, points):
        single = np.ndim(points) == 0 or (np.ndim(points) == 1 and self.base.dim > 1)
        pts = np.asarray(points, dtype=float).reshape(-1, self.base.dim)
        vals = np.atleast_1d(self.base(pts)) - self.offset
        out = np.where(self.support.contains(pts, "closure"), vals, INF)
        return float(out[0]) if single else out

    def as_field(self) -> ScalarField:
        return ScalarField.closed_form(self.base.dim, lambda p: self(p), domain=lambda p: self.support.contains(p, "closure"))


def conditional_rate(rate: ScalarField, B: ConditioningSet, inf_value: float) -> ConditionalRate:
    if not math.isfinite(inf_value):
        raise ValueError("conditioning on rate-infinite set: inf I(B) is infinite")
    return ConditionalRate(rate, float(inf_value), B)


def conditional_marginal_rate(psi: ScalarField, tilt: TiltSolution, rate: ScalarField | None = None,
                              lambda_grid: Grid | None = None, xy_grid: Grid | None = None) -> ScalarField:
    """y -> I(x0, y) - lambda0 . x0 + Psi(lambda0, 0).

    Uses the closed-form joint rate when given.  Otherwise Psi is conjugated
    on ``lambda_grid`` -> ``xy_grid`` and sliced at the x column nearest x0;
    the slice error bound (Lipschitz in x times the offset from x0) is kept in
    the metadata.
    """
    d = len(tilt.x0)
    dp = psi.dim - d
    shift = tilt.min_rate
    x0 = tilt.x0
    if dp == 0:
        return ScalarField.closed_form(0, lambda p: np.zeros(len(p)))
    if rate is not None:
        def func(y):
            return rate(np.hstack([np.tile(x0, (len(y), 1)), y])) - shift

        return ScalarField.closed_form(dp, func, domain=lambda y: rate.in_domain(np.hstack([np.tile(x0, (len(y), 1)), y])))
    if lambda_grid is None or xy_grid is None:
        raise ValueError("numeric conditional marginal rate needs lambda_grid and xy_grid")
    tab = conjugate(psi, lambda_grid, xy_grid, method="separable")
    idx = xy_grid.nearest_index(np.concatenate([x0, np.zeros(dp)]))[:d]
    values = tab.values[idx]
    x_used = np.array([xy_grid.axes[k][i] for k, i in enumerate(idx)])
    finite = values[np.isfinite(values)]
    slab = tab.values[tuple(slice(max(i - 1, 0), i + 2) for i in idx)]
    with np.errstate(invalid="ignore"):
        dx = np.abs(np.diff(slab, axis=0)) / xy_grid.steps[0] if slab.shape[0] > 1 else np.zeros(1)
    lip = float(np.nanmax(np.where(np.isfinite(dx), dx, np.nan))) if np.isfinite(dx).any() else 0.0
    y_grid = Grid(xy_grid.lower[d:], xy_grid.upper[d:], xy_grid.counts[d:])
    return ScalarField.tabulated(
        y_grid,
        np.where(np.isfinite(values), values - shift, INF),
        x_slice=x_used.tolist(),
        slice_error_bound=lip * float(np.max(np.abs(x_used - x0))),
        boundary_argmax=tab.metadata["boundary_argmax"][idx],
        finite_min=float(finite.min() - shift) if finite.size else INF,
    )


def conditional_free_energy(psi: ScalarField, lambda0) -> ScalarField:
    """lambda -> Psi(lambda0, lambda) - Psi(lambda0, 0)."""
    lambda0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    d = len(lambda0)
    dp = psi.dim - d
    base = psi.value(np.concatenate([lambda0, np.zeros(dp)]))
    if not math.isfinite(base):
        raise DomainError("Psi(lambda0, 0) is infinite")
    if dp == 0:
        return ScalarField.closed_form(0, lambda p: np.zeros(len(p)))

    def func(lam):
        return psi(np.hstack([np.tile(lambda0, (len(lam), 1)), lam])) - base

    grad = None
    if psi.grad is not None:
        def grad(lam):
            return gradient(psi, np.concatenate([lambda0, lam]))[d:]

    def domain(lam):
        return psi.in_domain(np.hstack([np.tile(lambda0, (len(lam), 1)), lam]))

    return ScalarField.closed_form(dp, func, grad, domain)


def verify_duality(psi_x0: ScalarField, i_x0: ScalarField, lambda_grid: Grid | None, y_grid: Grid | None,
                   layers: int = 2) -> float:
    """Sup-norm gap between conjugate(psi_x0) and i_x0 on the interior of ``y_grid``.

    Points where exactly one side is infinite count as an infinite gap.
    """
    if psi_x0.dim == 0:
        return 0.0
    g = conjugate(psi_x0, lambda_grid, y_grid).values
    iv = i_x0.on_grid(y_grid)
    keep = y_grid.boundary_distance() >= layers
    both_inf = np.isinf(g) & np.isinf(iv)
    with np.errstate(invalid="ignore"):
        diff = np.where(both_inf, 0.0, np.abs(g - iv))
    diff = np.where(np.isnan(diff), INF, diff)
    return float(diff[keep].max()) if keep.any() else 0.0


@dataclass
class ConsistencyReport:
    inf_interior: float
    inf_closure: float
    gap: float
    tolerance: float
    hypothesis_ok: bool
    passed: bool
    notes: list = field(default_factory=list)

    @property
    def status(self) -> str:
        if not self.hypothesis_ok:
            return "hypothesis violated"
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {
            "inf_interior": self.inf_interior,
            "inf_closure": self.inf_closure,
            "gap": self.gap,
            "tolerance": self.tolerance,
            "hypothesis_ok": self.hypothesis_ok,
            "passed": self.passed,
            "status": self.status,
            "notes": list(self.notes),
        }


def dilate_box(mask: np.ndarray) -> np.ndarray:
    """Dilation by the full 3^d neighbourhood (diagonals included)."""
    out = mask.copy()
    for ax in range(mask.ndim):
        out = out | _shift(out, ax, 1) | _shift(out, ax, -1)
    return out


def regular_closure(B: ConditioningSet, grid: Grid) -> bool:
    """Grid surrogate of closure(B°) = closure(B).

    Every closure node must lie within one cell (diagonals included) of an
    interior node.  Analytic sets use strict membership as their interior.
    Grid predicates are eroded, with off-grid neighbours ignored since the
    grid box is not part of B.  A zero-thickness shell fails outright: its
    interior is empty whether or not a node happens to sit on the hyperplane.
    """
    if B.kind == "shell" and B.delta == 0 and not B.degenerate:
        return False
    closure = B.grid_mask(grid, "closure")
    interior = erode(B.mask, outside=True) if B.kind == "grid" else B.grid_mask(grid, "interior")
    return bool(np.all(~closure | dilate_box(interior)))


def _masked_min(vals, mask):
    sel = vals[mask & np.isfinite(vals)]
    return float(sel.min()) if sel.size else INF


def check_infimum_consistency(rate: ScalarField, A: ConditioningSet, B: ConditioningSet, grid: Grid) -> ConsistencyReport:
    """Compare inf I(A° ∩ B°) with inf I(A° ∩ closure B) on the grid."""
    notes = []
    hypothesis_ok = regular_closure(B, grid)
    if not hypothesis_ok:
        notes.append("closure of B has grid points not adjacent to its interior")
    vals = rate.on_grid(grid)
    a_int = A.grid_mask(grid, "interior")
    b_int = B.grid_mask(grid, "interior")
    b_clo = B.grid_mask(grid, "closure")
    inf_int = _masked_min(vals, a_int & b_int)
    inf_clo = _masked_min(vals, a_int & b_clo)
    if math.isinf(inf_int) and math.isinf(inf_clo):
        gap = 0.0
        notes.append("A° ∩ B° is empty on the grid")
    elif math.isinf(inf_int):
        gap = INF
        notes.append("A° ∩ B° has no grid nodes while A° ∩ closure(B) does: grid too coarse for the intersection")
    else:
        gap = inf_int - inf_clo
    region = dilate(a_int & b_clo)
    tolerance = grid.step * lipschitz_estimate(vals, grid, region) + 1e-12
    passed = hypothesis_ok and gap <= tolerance
    return ConsistencyReport(inf_int, inf_clo, gap, tolerance, hypothesis_ok, passed, notes)
