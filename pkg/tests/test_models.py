import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condldp.convex_core import DomainError, Grid, conjugate
from condldp.models import (
    CHUNK,
    empirical_psi,
    make_bernoulli_cramer,
    make_gaussian_cramer,
    make_model,
    normalize_tilt,
    sample_batch,
)


def kl(x, p):
    return x * math.log(x / p) + (1 - x) * math.log((1 - x) / (1 - p))


class TestClosedForms:
    def test_gaussian_equilibrium(self, gauss):
        assert gauss.equilibrium[0] == pytest.approx(0.0, abs=1e-9)

    def test_bernoulli_rate_is_kl(self, bern):
        for x in (0.05, 0.3, 0.5, 0.9):
            assert bern.rate(x) == pytest.approx(kl(x, 0.3), rel=1e-12)
        assert bern.rate(0.0) == pytest.approx(-math.log(0.7))
        assert bern.rate(1.1) == math.inf

    def test_bernoulli_psi_gradient(self, bern):
        # d/dl log(1-p+p e^l) = p e^l / (1-p+p e^l)
        lam = 0.8
        expect = 0.3 * math.exp(lam) / (0.7 + 0.3 * math.exp(lam))
        assert bern.psi_x().grad(np.array([lam]))[0] == pytest.approx(expect, rel=1e-12)

    def test_pair_equilibrium(self, pair):
        np.testing.assert_allclose(pair.equilibrium, [0.0, 1.0], atol=1e-9)

    def test_pair_psi_outside_domain(self, pair):
        assert pair.psi([0.0, 0.5]) == math.inf
        assert pair.psi([0.0, 0.7]) == math.inf

    def test_pair_rate(self, pair):
        assert pair.rate([0.0, 1.0]) == 0.0
        assert pair.rate([1.0, 1.0]) == math.inf
        assert pair.rate([1.0, 3.0]) == pytest.approx(0.5 * (2 - math.log(2)))

    def test_numeric_conjugate_of_bernoulli_psi(self, bern):
        g = conjugate(bern.psi, Grid.uniform(-8, 8, 2048), Grid.uniform(0.05, 0.95, 19))
        x = g.grid.axes[0]
        np.testing.assert_allclose(g.values, [kl(v, 0.3) for v in x], atol=1e-4)


class TestValidation:
    def test_sigma(self):
        with pytest.raises(ValueError):
            make_gaussian_cramer(0.0, 0.0)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_p(self, p):
        with pytest.raises(ValueError):
            make_bernoulli_cramer(p)

    def test_unknown_model(self):
        with pytest.raises(KeyError):
            make_model("nope")

    def test_pair_rejects_y_tilt(self, pair):
        with pytest.raises(ValueError, match="unsupported tilt direction"):
            normalize_tilt(pair, [1.0, 0.2])
        np.testing.assert_array_equal(normalize_tilt(pair, [1.0, 0.0]), [1.0])

    def test_empty_batch(self, gauss):
        assert sample_batch(gauss, 10, 1, 0) == []


class TestDeterminism:
    def test_replica_independent_of_batching(self, pair):
        x, y = pair.draw(50, 7, 0, 3 * CHUNK + 5)
        for r in (0, CHUNK - 1, CHUNK, 2 * CHUNK + 17, 3 * CHUNK + 4):
            xs, ys = pair.sample(50, 7, r)
            assert xs[0] == x[r, 0] and ys[0] == y[r, 0]

    def test_thread_count_irrelevant(self, bern):
        a = bern.draw(40, 3, 100, 5000, workers=1)
        b = bern.draw(40, 3, 100, 5000, workers=4)
        np.testing.assert_array_equal(a[0], b[0])

    def test_zero_tilt_is_plain_sampler(self, gauss, bern, pair):
        for m in (gauss, bern, pair):
            a = m.draw(30, 11, 0, 200)
            b = m.draw(30, 11, 0, 200, tilt=np.zeros(m.d))
            np.testing.assert_array_equal(a[0], b[0])
            np.testing.assert_array_equal(a[1], b[1])

    def test_seed_and_n_change_stream(self, gauss):
        base = gauss.draw(10, 1, 0, 10)[0]
        assert not np.array_equal(base, gauss.draw(10, 2, 0, 10)[0])
        assert not np.array_equal(base, gauss.draw(11, 1, 0, 10)[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2**32), st.integers(0, 5000))
def test_sampling_is_pure(n, seed, replica):
    m = make_bernoulli_cramer(0.4)
    assert m.sample(n, seed, replica)[0][0] == m.sample(n, seed, replica)[0][0]


class TestMoments:
    """Sampler moments against the exact distribution of the sufficient statistic."""

    def test_gaussian_mean_variance(self):
        m = make_gaussian_cramer(1.5, 2.0)
        x = m.draw(25, 5, 0, 40000)[0][:, 0]
        assert x.mean() == pytest.approx(1.5, abs=5 * 0.4 / 200)
        assert x.var() == pytest.approx(4 / 25, rel=0.03)

    def test_bernoulli_support_and_mean(self, bern):
        x = bern.draw(20, 5, 0, 40000)[0][:, 0]
        assert set(np.unique(x * 20)).issubset(set(range(21)))
        assert x.mean() == pytest.approx(0.3, abs=5 * math.sqrt(0.21 / 20 / 40000))

    def test_bernoulli_tilted_mean(self, bern):
        lam = 1.0
        pt = 0.3 * math.e / (0.7 + 0.3 * math.e)
        x = bern.draw(20, 5, 0, 40000, tilt=[lam])[0][:, 0]
        assert x.mean() == pytest.approx(pt, abs=5 * math.sqrt(pt * (1 - pt) / 20 / 40000))

    def test_pair_moments(self, pair):
        n = 10
        x, y = pair.draw(n, 9, 0, 40000, tilt=[0.5])
        # under the tilt Z_i ~ N(0.5, 1): E X = 0.5, E Y = 1.25
        assert x.mean() == pytest.approx(0.5, abs=0.01)
        assert y.mean() == pytest.approx(1.25, abs=0.01)
        assert np.all(y[:, 0] >= x[:, 0] ** 2)


class TestEmpiricalPsi:
    def test_gaussian(self, gauss):
        # log-weight variance a_n lam^2 = 1 keeps the estimator well behaved
        est, se = empirical_psi(gauss, 4, [0.5], 1, 20000)
        assert abs(est - 0.125) <= 5 * se + 1e-3

    def test_bernoulli(self, bern):
        est, se = empirical_psi(bern, 50, [0.7], 1, 20000)
        assert abs(est - bern.psi.value([0.7])) <= 5 * se + 1e-3

    def test_pair(self, pair):
        lam = [0.3, 0.1]
        est, se = empirical_psi(pair, 50, lam, 1, 20000)
        assert abs(est - pair.psi.value(lam)) <= 5 * se + 1e-3

    def test_outside_domain(self, pair):
        with pytest.raises(DomainError):
            empirical_psi(pair, 10, [0.0, 0.6], 1, 100)

    def test_needs_replicas(self, gauss):
        with pytest.raises(ValueError):
            empirical_psi(gauss, 10, [0.1], 1, 1)
