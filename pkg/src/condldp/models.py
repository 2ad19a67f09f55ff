"""Bundled joint models (X_n, Y_n) with closed-form free energies.

Every model draws its replicas from a counter-based Philox stream keyed by
``(seed, n)``; replica ``r`` lives in chunk ``r // CHUNK`` and that chunk's
stream starts at counter block ``r // CHUNK``.  A draw is therefore a pure
function of ``(n, seed, replica)`` regardless of how replicas are batched or
spread across threads.

Samplers produce the sufficient statistics directly (sample mean, and for
the Gaussian pair the independent chi-square sum of squared deviations), so
the cost per replica does not grow with ``n``.  Tilted draws reuse the same
base variates as the plain sampler, which gives common random numbers across
tilts and makes a zero tilt reproduce the plain sampler exactly.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import special, stats

from .convex_core import INF, DomainError, ScalarField, as_vector, gradient

CHUNK = 1024


def max_workers() -> int:
    """Worker cap from ``LDP_MAX_THREADS`` (speed only; results never depend on it)."""
    raw = os.environ.get("LDP_MAX_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(4, os.cpu_count() or 1)


def _stream(seed: int, n: int, chunk: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(key=[seed, n], counter=[0, 0, chunk, 0]))


@dataclass(frozen=True, eq=False)
class JointModel:
    """A sequence of random vectors (X_n, Y_n) in R^d x R^d'.

    ``base`` draws the model's raw variates for one chunk from a generator;
    ``transform`` turns them into (X, Y) arrays under a tilt (lambda0, 0).
    ``psi`` is the free energy on R^(d+d'), ``rate`` its closed-form
    Legendre transform when known.
    """

    name: str
    d: int
    d_prime: int
    psi: ScalarField
    base: Callable
    transform: Callable
    rate: ScalarField | None = None
    params: Mapping = field(default_factory=dict)
    scale: Callable = float

    def a(self, n: int) -> float:
        return float(self.scale(n))

    @property
    def dim(self) -> int:
        return self.d + self.d_prime

    @property
    def equilibrium(self) -> np.ndarray:
        return gradient(self.psi, np.zeros(self.dim))

    def psi_x(self) -> ScalarField:
        """Free energy of X alone, lambda -> Psi(lambda, 0)."""
        psi, d, dp = self.psi, self.d, self.d_prime

        def func(lam):
            return psi(np.hstack([lam, np.zeros((len(lam), dp))]))

        def grad(lam):
            return gradient(psi, np.concatenate([lam, np.zeros(dp)]))[:d]

        return ScalarField.closed_form(d, func, grad)

    def log_normalizer(self, n: int, tilt) -> float:
        """log E[exp(a_n tilt . X_n)], exact for sample means of iid draws."""
        tilt = normalize_tilt(self, tilt)
        return self.a(n) * self.psi.value(np.concatenate([tilt, np.zeros(self.d_prime)]))

    def _chunk(self, n: int, seed: int, chunk: int):
        return self.base(_stream(seed, n, chunk), CHUNK, n)

    def draw(self, n: int, seed: int, start: int, stop: int, tilt=None, workers: int | None = None):
        """Replicas ``start..stop-1`` as arrays X (m, d) and Y (m, d')."""
        if n < 1:
            raise ValueError("n must be a positive integer")
        tilt = np.zeros(self.d) if tilt is None else normalize_tilt(self, tilt)
        if stop <= start:
            return np.zeros((0, self.d)), np.zeros((0, self.d_prime))
        chunks = range(start // CHUNK, (stop - 1) // CHUNK + 1)
        workers = max_workers() if workers is None else workers

        def one(c):
            x, y = self.transform(self._chunk(n, seed, c), n, tilt)
            lo = max(start - c * CHUNK, 0)
            hi = min(stop - c * CHUNK, CHUNK)
            return x[lo:hi], y[lo:hi]

        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(one, chunks))
        else:
            parts = [one(c) for c in chunks]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def sample(self, n: int, seed: int, replica: int):
        x, y = self.draw(n, seed, replica, replica + 1)
        return x[0], y[0]

    def tilt_sample(self, n: int, seed: int, replica: int, tilt):
        x, y = self.draw(n, seed, replica, replica + 1, tilt=tilt)
        return x[0], y[0]


def _column(v):
    return np.asarray(v, dtype=float).reshape(-1, 1)


def make_gaussian_cramer(mu: float, sigma: float) -> JointModel:
    """Sample mean of n iid Normal(mu, sigma^2) draws; d = 1, d' = 0."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    mu, sigma = float(mu), float(sigma)
    var = sigma * sigma

    psi = ScalarField.closed_form(
        1,
        lambda lam: mu * lam[:, 0] + 0.5 * var * lam[:, 0] ** 2,
        grad=lambda lam: np.array([mu + var * lam[0]]),
    )
    rate = ScalarField.closed_form(
        1,
        lambda x: (x[:, 0] - mu) ** 2 / (2 * var),
        grad=lambda x: np.array([(x[0] - mu) / var]),
    )

    def base(gen, count, n):
        return {"z": gen.standard_normal(count)}

    def transform(b, n, tilt):
        x = mu + var * tilt[0] + sigma * b["z"] / math.sqrt(n)
        return _column(x), np.zeros((len(x), 0))

    return JointModel("gaussian_cramer", 1, 0, psi, base, transform, rate, {"mu": mu, "sigma": sigma})


def make_bernoulli_cramer(p: float) -> JointModel:
    """Sample mean of n iid Bernoulli(p) draws; d = 1, d' = 0."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    p = float(p)
    logit_p = math.log(p) - math.log1p(-p)

    def psi_func(lam):
        return np.logaddexp(math.log1p(-p), math.log(p) + lam[:, 0])

    psi = ScalarField.closed_form(1, psi_func, grad=lambda lam: np.array([special.expit(lam[0] + logit_p)]))

    def rate_func(x):
        x = x[:, 0]
        inside = (x >= 0) & (x <= 1)
        xc = np.clip(x, 0, 1)
        kl = special.rel_entr(xc, p) + special.rel_entr(1 - xc, 1 - p)
        return np.where(inside, kl, INF)

    rate = ScalarField.closed_form(1, rate_func, domain=lambda x: (x[:, 0] >= 0) & (x[:, 0] <= 1))

    def base(gen, count, n):
        return {"u": gen.random(count)}

    def transform(b, n, tilt):
        p_tilt = special.expit(tilt[0] + logit_p) if tilt[0] != 0 else p
        k = np.maximum(stats.binom.ppf(b["u"], n, p_tilt), 0.0)
        return _column(k / n), np.zeros((len(k), 0))

    return JointModel("bernoulli_cramer", 1, 0, psi, base, transform, rate, {"p": p})


def make_gaussian_pair() -> JointModel:
    """X_n = mean of Z_i, Y_n = mean of Z_i^2 with Z_i iid Normal(0, 1).

    Tilts are restricted to directions (lambda0, 0), under which the Z_i are
    Normal(lambda0, 1).
    """

    def psi_func(lam):
        l1, l2 = lam[:, 0], lam[:, 1]
        s = 1.0 - 2.0 * l2
        ok = s > 0
        ss = np.where(ok, s, 1.0)
        return np.where(ok, -0.5 * np.log(ss) + l1**2 / (2 * ss), INF)

    def psi_grad(lam):
        s = 1.0 - 2.0 * lam[1]
        return np.array([lam[0] / s, 1.0 / s + lam[0] ** 2 / s**2])

    psi = ScalarField.closed_form(2, psi_func, grad=psi_grad, domain=lambda lam: lam[:, 1] < 0.5)

    def rate_func(xy):
        x, y = xy[:, 0], xy[:, 1]
        gap = y - x**2
        ok = gap > 0
        return np.where(ok, 0.5 * (y - 1.0 - np.log(np.where(ok, gap, 1.0))), INF)

    rate = ScalarField.closed_form(2, rate_func, domain=lambda xy: xy[:, 1] > xy[:, 0] ** 2)

    def base(gen, count, n):
        z = gen.standard_normal(count)
        half_chi2 = gen.standard_gamma((n - 1) / 2.0, count) if n > 1 else np.zeros(count)
        return {"z": z, "half_chi2": half_chi2}

    def transform(b, n, tilt):
        total = n * tilt[0] + math.sqrt(n) * b["z"]
        x = total / n
        y = (2.0 * b["half_chi2"] + total**2 / n) / n
        return _column(x), _column(y)

    return JointModel("gaussian_pair", 1, 1, psi, base, transform, rate, {})


MODELS = {
    "gaussian_cramer": make_gaussian_cramer,
    "bernoulli_cramer": make_bernoulli_cramer,
    "gaussian_pair": make_gaussian_pair,
}


def make_model(name: str, **params) -> JointModel:
    if name not in MODELS:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODELS)}")
    return MODELS[name](**params)


def normalize_tilt(model: JointModel, tilt) -> np.ndarray:
    """Accept a length-d tilt or a full (lambda0, 0) vector; reject other directions."""
    tilt = np.atleast_1d(np.asarray(tilt, dtype=float))
    if tilt.shape == (model.dim,) and model.d_prime:
        if np.any(tilt[model.d :] != 0):
            raise ValueError("unsupported tilt direction: only (lambda0, 0) tilts are available")
        tilt = tilt[: model.d]
    return as_vector(tilt, model.d)


def sample_batch(model: JointModel, n: int, seed: int, count: int) -> list:
    """Draws for replicas 0..count-1 as a list of (X, Y) pairs."""
    if count <= 0:
        return []
    x, y = model.draw(n, seed, 0, count)
    return list(zip(x, y))


def empirical_psi(model: JointModel, n: int, lam, seed: int, replicas: int):
    """Monte Carlo free energy (1/a_n) log mean exp(a_n lam . (X, Y)).

    Returns ``(estimate, stderr)``; the error is the delta-method standard
    error of the log of the sample mean.  The mean is formed after a max
    shift, so large exponents do not overflow.
    """
    if replicas < 2:
        raise ValueError("empirical_psi needs at least 2 replicas")
    lam = as_vector(lam, model.dim)
    if not math.isfinite(model.psi.value(lam)):
        raise DomainError(f"lambda {lam.tolist()} outside the effective domain of Psi")
    a_n = model.a(n)
    x, y = model.draw(n, seed, 0, replicas)
    s = a_n * (np.hstack([x, y]) @ lam)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("exponent overflow in every rescaling of the replica weights")
    shift = float(s.max())
    w = np.exp(s - shift)
    mean_w = float(w.mean())
    if not (mean_w > 0 and math.isfinite(mean_w)):
        raise FloatingPointError("replica weights under- or overflowed after rescaling")
    estimate = (shift + math.log(mean_w)) / a_n
    stderr = float(w.std(ddof=1)) / (mean_w * math.sqrt(replicas)) / a_n
    return estimate, stderr
