"""Monte Carlo estimates of a_n^-1 log P_n(A | B) and related checks.

The tilted estimator writes P(E) = exp(log Z(lam)) * E_lam[1_E exp(-a_n lam.X)]
with the tilt lam placed at E's dominating point, one tilt per event (A∩B
and B).  Z is the model's exact finite-n normaliser.  Both events reuse
the same base variates, so the two log-probabilities are positively
correlated and the delta-method error on their difference accounts for the
covariance.  When both events get the same tilt, Z cancels and the
estimator is the plain self-normalised ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conditional import ConditioningSet, SolverError, solve_tilt
from .convex_core import INF, Grid
from .models import JointModel

NEG_INF = -INF
LOW_CONFIDENCE_ESS = 100


@dataclass(frozen=True, eq=False)
class EventSet:
    """Event A on (X, Y) draws: everything, a box, a half-space or a shell.

    ``normal``/``anchor`` act on the full (x, y) vector, unlike conditioning
    sets, whose normal acts on x only.
    """

    kind: str
    normal: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None
    delta: Optional[float] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @classmethod
    def everything(cls) -> "EventSet":
        return cls("all")

    @classmethod
    def half_space(cls, normal, anchor) -> "EventSet":
        return cls("halfspace", np.atleast_1d(np.asarray(normal, float)), np.atleast_1d(np.asarray(anchor, float)))

    @classmethod
    def shell(cls, normal, anchor, delta) -> "EventSet":
        return cls("shell", np.atleast_1d(np.asarray(normal, float)), np.atleast_1d(np.asarray(anchor, float)), float(delta))

    @classmethod
    def box(cls, lower, upper) -> "EventSet":
        return cls("box", lower=np.atleast_1d(np.asarray(lower, float)), upper=np.atleast_1d(np.asarray(upper, float)))

    @classmethod
    def from_dict(cls, spec: dict) -> "EventSet":
        kind = spec.get("kind", "all")
        if kind == "all":
            return cls.everything()
        if kind == "halfspace":
            return cls.half_space(spec["normal"], spec["anchor"])
        if kind == "shell":
            return cls.shell(spec["normal"], spec["anchor"], spec["delta"])
        if kind == "box":
            return cls.box(spec["lower"], spec["upper"])
        raise ValueError(f"unknown event kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "all":
            return {"kind": "all"}
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        out = {"kind": self.kind, "normal": self.normal.tolist(), "anchor": self.anchor.tolist()}
        if self.kind == "shell":
            out["delta"] = self.delta
        return out

    def contains(self, points, mode: str = "raw") -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "all":
            return np.ones(len(pts), dtype=bool)
        if self.kind == "box":
            lo, hi = self.lower, self.upper
            if mode == "interior":
                return np.all((pts > lo) & (pts < hi), axis=1)
            return np.all((pts >= lo) & (pts <= hi), axis=1)
        v = (pts[:, : len(self.normal)] - self.anchor) @ self.normal
        if mode == "interior":
            member = v > 0
            if self.kind == "shell":
                member &= v < self.delta
            return member
        member = v >= 0
        if self.kind == "shell":
            member &= (v <= self.delta) if mode == "closure" else (v < self.delta)
        return member

    def grid_mask(self, grid: Grid, mode: str = "raw") -> np.ndarray:
        return self.contains(grid.points(), mode).reshape(grid.shape)

    def x_interval(self, d: int):
        """Constraint on the first coordinate when the event only involves x (d = 1)."""
        if self.kind == "all":
            return -INF, INF
        if self.kind == "box":
            if np.any(np.isfinite(self.lower[d:])) or np.any(np.isfinite(self.upper[d:])):
                return None
            return float(self.lower[0]), float(self.upper[0])
        if np.any(self.normal[d:] != 0):
            return None
        return _interval_1d(float(self.normal[0]), float(self.anchor[0]), self.delta if self.kind == "shell" else None)


def _interval_1d(nu: float, a: float, delta: float | None):
    if nu == 0:
        return (-INF, INF) if delta is None or delta > 0 else (INF, -INF)
    if delta is None:
        return (a, INF) if nu > 0 else (-INF, a)
    end = a + delta / nu
    return (a, end) if nu > 0 else (end, a)


def _set_x_interval(B: ConditioningSet):
    if B.kind == "grid" or B.d != 1:
        return None
    if B.degenerate:
        return -INF, INF
    return _interval_1d(float(B.normal[0]), float(B.anchor[0]), B.delta if B.kind == "shell" else None)


@dataclass(frozen=True)
class LdpEstimate:
    n: int
    a_n: float
    replicas: int
    method: str
    estimate: float
    stderr: float
    hits_ab: int
    hits_b: int
    tilt_ab: tuple
    tilt_b: tuple
    ess_ab: float
    ess_b: float

    @property
    def low_confidence(self) -> bool:
        return min(self.ess_ab, self.ess_b) < LOW_CONFIDENCE_ESS

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "a_n": self.a_n,
            "replicas": self.replicas,
            "method": self.method,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "hits_ab": self.hits_ab,
            "hits_b": self.hits_b,
            "tilt_ab": list(self.tilt_ab),
            "tilt_b": list(self.tilt_b),
            "ess_ab": self.ess_ab,
            "ess_b": self.ess_b,
            "low_confidence": self.low_confidence,
        }


def _dominating_tilt(model: JointModel, interval) -> np.ndarray:
    """Tilt at the point of a 1-d x interval closest to x* (where I_X is smallest)."""
    lo, hi = interval
    x_star = float(model.equilibrium[0])
    if lo > hi:
        return None
    target = min(max(x_star, lo), hi)
    if target == x_star:
        return np.zeros(1)
    return solve_tilt(model.psi, [target]).lambda0


def _intersect(i1, i2):
    if i1 is None or i2 is None:
        return None
    return max(i1[0], i2[0]), min(i1[1], i2[1])


def choose_tilts(model: JointModel, A: EventSet, B: ConditioningSet):
    """Tilts for (A∩B, B): dominating points in one dimension, B's normal otherwise."""
    b_int = _set_x_interval(B) if model.d == 1 else None
    if b_int is None:
        if B.kind == "grid":
            raise ValueError("tilted method needs a half-space or shell conditioning set")
        return B.normal.copy(), B.normal.copy()
    tilt_b = _dominating_tilt(model, b_int)
    ab_int = _intersect(A.x_interval(model.d), b_int)
    if ab_int is None:
        ab_int = b_int
    tilt_ab = _dominating_tilt(model, ab_int)
    if tilt_ab is None:
        tilt_ab = tilt_b
    return tilt_ab, tilt_b


def _log_mean_and_moments(logw: np.ndarray, member: np.ndarray):
    """log of mean(member * exp(logw)) and the shifted weights used for moments."""
    if not member.any():
        return NEG_INF, np.zeros(len(logw)), 0.0
    shift = float(logw[member].max())
    w = np.where(member, np.exp(logw - shift), 0.0)
    m = float(w.mean())
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return shift + math.log(m), w, ess


def estimate_conditional_logprob(model: JointModel, n: int, A: EventSet, B: ConditioningSet, method: str = "tilted",
                                 seed: int = 0, replicas: int = 10_000) -> LdpEstimate:
    """Estimate a_n^-1 log P_n(A | B) by direct sampling or exponential tilting."""
    if replicas < 100:
        raise ValueError("estimate_conditional_logprob needs at least 100 replicas")
    if method not in ("direct", "tilted"):
        raise ValueError(f"method must be 'direct' or 'tilted', got {method!r}")
    a_n = model.a(n)
    if method == "direct":
        tilt_ab = tilt_b = np.zeros(model.d)
    else:
        tilt_ab, tilt_b = choose_tilts(model, A, B)

    draws = {}

    def weighted(tilt):
        key = tuple(tilt)
        if key not in draws:
            x, y = model.draw(n, seed, 0, replicas, tilt=tilt)
            pts = np.hstack([x, y])
            logw = model.log_normalizer(n, tilt) - a_n * (x @ tilt) if np.any(tilt) else np.zeros(len(x))
            draws[key] = (pts, logw)
        return draws[key]

    pts_ab, logw_ab = weighted(tilt_ab)
    pts_b, logw_b = weighted(tilt_b)
    in_ab = A.contains(pts_ab) & B.contains(pts_ab)
    in_b = B.contains(pts_b)
    hits_ab, hits_b = int(in_ab.sum()), int(in_b.sum())
    if hits_b == 0:
        if method == "direct":
            raise ValueError("conditioning event unobserved: use tilted method")
        raise ValueError("conditioning event unobserved under the tilted sampler")

    log_ab, w_ab, ess_ab = _log_mean_and_moments(logw_ab, in_ab)
    log_b, w_b, ess_b = _log_mean_and_moments(logw_b, in_b)
    if hits_ab == 0:
        estimate, stderr = NEG_INF, 0.0
    elif tuple(tilt_ab) == tuple(tilt_b) and np.array_equal(in_ab, in_b):
        estimate, stderr = 0.0, 0.0
    else:
        estimate = min((log_ab - log_b) / a_n, 0.0)
        m_ab, m_b = w_ab.mean(), w_b.mean()
        cov = np.cov(np.vstack([w_ab / m_ab, w_b / m_b]), ddof=1)
        var = (cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]) / replicas
        stderr = math.sqrt(max(var, 0.0)) / a_n
    return LdpEstimate(n, a_n, replicas, method, estimate, stderr, hits_ab, hits_b,
                       tuple(float(t) for t in tilt_ab), tuple(float(t) for t in tilt_b), ess_ab, ess_b)


def canonical_expectation(model: JointModel, n: int, lambda0, seed: int, replicas: int, proposal_tilt=None):
    """Self-normalised estimate of E[Y exp(a_n lambda0.X)] / E[exp(a_n lambda0.X)].

    Draws come from the sampler tilted by ``proposal_tilt`` (default
    ``lambda0``, where every weight equals one).  Returns (estimate, stderr)
    with a delta-method error for the ratio.
    """
    if model.d_prime == 0:
        raise ValueError("model has no Y component")
    if replicas < 100:
        raise ValueError("canonical_expectation needs at least 100 replicas")
    lambda0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    proposal = lambda0 if proposal_tilt is None else np.atleast_1d(np.asarray(proposal_tilt, dtype=float))
    x, y = model.draw(n, seed, 0, replicas, tilt=proposal)
    logw = model.a(n) * (x @ (lambda0[: model.d] - proposal[: model.d]))
    w = np.exp(logw - logw.max())
    wn = w / w.sum()
    est = wn @ y
    # delta method for a ratio of means: var(sum w (y - est)) / (sum w)^2
    resid = w[:, None] * (y - est)
    se = np.sqrt(resid.var(axis=0, ddof=1) * replicas) / w.sum()
    return est, se


@dataclass(frozen=True)
class SandwichVerdict:
    passed: bool
    lower: float
    upper: float
    slack: float
    branch: str

    def to_dict(self) -> dict:
        return {"passed": self.passed, "lower": self.lower, "upper": self.upper, "slack": self.slack, "branch": self.branch}


def sandwich_check(est: LdpEstimate, inf_closure: float, inf_interior: float, epsilon: float = 0.1) -> SandwichVerdict:
    """Check -(1+eps) inf I_B(A°) - slack <= estimate <= -(1-eps) inf I_B(closure A) + slack.

    ``slack`` is four standard errors.  An infinite closure infimum demands a
    NegInfinite estimate; a zero interior infimum only demands estimate > -eps - slack.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    value, slack = est.estimate, 4.0 * est.stderr
    if math.isinf(inf_closure):
        ok = value == NEG_INF
        return SandwichVerdict(ok, NEG_INF, NEG_INF, slack, "closure infimum infinite")
    upper = -(1.0 - epsilon) * inf_closure + slack
    if math.isinf(inf_interior):
        lower, branch = NEG_INF, "interior infimum infinite"
    elif inf_interior == 0:
        lower, branch = -epsilon - slack, "interior infimum zero"
    else:
        lower, branch = -(1.0 + epsilon) * inf_interior - slack, "two-sided"
    if value == NEG_INF:
        ok = lower == NEG_INF
    else:
        ok = (value > lower if branch == "interior infimum zero" else value >= lower) and value <= upper
    return SandwichVerdict(bool(ok), lower, upper, slack, branch)


def conditional_infima(model: JointModel, A: EventSet, B: ConditioningSet, grid: Grid | None = None):
    """(inf I_B(closure A), inf I_B(A°), inf I(B)) for the model's rate.

    Events on x alone (d = 1) use exact tilt-based values; anything else is
    minimised on ``grid`` with the model's closed-form rate.
    """
    b_int = _set_x_interval(B) if model.d == 1 else None
    a_int = A.x_interval(model.d) if model.d == 1 else None
    if b_int is not None and a_int is not None:
        inf_b = _interval_rate(model, b_int)
        ab = _intersect(a_int, b_int)
        inf_ab = _interval_rate(model, ab)
        # interior of A∩B is empty when the interval has no length
        inf_ab_int = inf_ab if ab[0] < ab[1] else INF
        return inf_ab - inf_b, inf_ab_int - inf_b, inf_b
    if grid is None or model.rate is None:
        raise ValueError("non-interval events need a grid and a closed-form rate")
    vals = model.rate.on_grid(grid)
    b_raw = B.grid_mask(grid, "raw")
    if not b_raw.any():
        raise ValueError("empty conditioning set on grid")
    inf_b = float(np.min(np.where(b_raw, vals, INF)))
    clo = A.grid_mask(grid, "closure") & B.grid_mask(grid, "closure")
    inter = A.grid_mask(grid, "interior") & B.grid_mask(grid, "interior")
    inf_clo = float(np.min(np.where(clo, vals, INF))) if clo.any() else INF
    inf_int = float(np.min(np.where(inter, vals, INF))) if inter.any() else INF
    return inf_clo - inf_b, inf_int - inf_b, inf_b


def _interval_rate(model: JointModel, interval) -> float:
    lo, hi = interval
    if lo > hi:
        return INF
    x_star = float(model.equilibrium[0])
    target = min(max(x_star, lo), hi)
    if target == x_star:
        return 0.0
    try:
        return solve_tilt(model.psi, [target]).min_rate
    except SolverError:
        # boundary of the gradient range: fall back to the closed-form rate
        if model.rate is None:
            raise
        pt = np.concatenate([[target], model.equilibrium[1:]])
        return model.rate.value(pt)


@dataclass
class SweepResult:
    ns: list
    estimates: list
    target: float
    target_closure: float
    verdicts: list
    concentration: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "target_closure": self.target_closure,
            "rows": [
                {"n": n, **e.to_dict(), "sandwich": v.to_dict()}
                for n, e, v in zip(self.ns, self.estimates, self.verdicts)
            ],
            "concentration": self.concentration,
        }


def concentration_fraction(model: JointModel, n: int, B: ConditioningSet, center, radius: float, seed: int,
                           replicas: int, method: str = "tilted") -> dict:
    """Weighted share of B-conditioned draws within ``radius`` of ``center``."""
    if method == "tilted":
        b_int = _set_x_interval(B) if model.d == 1 else None
        tilt = _dominating_tilt(model, b_int) if b_int is not None else B.normal.copy()
    else:
        tilt = np.zeros(model.d)
    x, y = model.draw(n, seed, 0, replicas, tilt=tilt)
    pts = np.hstack([x, y])
    member = B.contains(pts)
    if not member.any():
        raise ValueError("conditioning event unobserved")
    logw = -model.a(n) * (x @ tilt)
    logw = np.where(member, logw, -INF)
    w = np.exp(logw - logw[member].max())
    close = np.linalg.norm(pts - np.asarray(center, dtype=float), axis=1) <= radius
    fraction = float(w[close].sum() / w.sum())
    return {"n": n, "radius": radius, "center": list(map(float, center)), "fraction": fraction,
            "members": int(member.sum()), "tilt": tilt.tolist()}


def convergence_sweep(model: JointModel, ns: Sequence[int], A: EventSet, B: ConditioningSet, method: str = "tilted",
                      seed: int = 0, replicas: int = 10_000, epsilon: float = 0.1, grid: Grid | None = None,
                      center=None, radius: float | None = None) -> SweepResult:
    """Estimates at each n with sandwich verdicts against -inf I_B(A°).

    When ``center`` and ``radius`` are given, the concentration fraction of
    B-conditioned draws at the largest n is reported as well.
    """
    ns = [int(n) for n in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("ns must be strictly increasing")
    inf_clo, inf_int, _ = conditional_infima(model, A, B, grid)
    estimates, verdicts = [], []
    for n in ns:
        est = estimate_conditional_logprob(model, n, A, B, method, seed, replicas)
        estimates.append(est)
        verdicts.append(sandwich_check(est, inf_clo, inf_int, epsilon))
    conc = None
    if center is not None and radius is not None:
        conc = concentration_fraction(model, ns[-1], B, center, radius, seed, replicas, method)
    return SweepResult(ns, estimates, -inf_int, -inf_clo, verdicts, conc)
