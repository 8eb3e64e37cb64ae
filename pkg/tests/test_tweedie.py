"""
Tests for the Tweedie distribution
"""

import math
import os
import unittest

import numpy as np
import torch
from scipy import integrate
from scipy.special import logsumexp

from src.exceptions import NumericRangeError, ParameterError
from src.tweedie import (CompoundParams, TruncationWorkspace, TweedieParams,
                         approx_log_density, approx_normalized_log_density,
                         from_compound, log_density, log_density_grad, prob_zero,
                         sample_tweedie, to_compound, truncate_series,
                         truncation_tail_bound, tweedie_log_prob)


def _positive_mass(p: TweedieParams, lo: float, hi: float) -> float:
    value, _ = integrate.quad(lambda y: math.exp(log_density(y, p)), lo, hi,
                              limit=200, epsabs=1e-11, epsrel=1e-10)
    return value


class TestParametrization(unittest.TestCase):
    """Test parameter validation and the compound representation"""

    def test_invalid_parameters_rejected(self):
        """Test that out-of-range parameters raise"""
        with self.assertRaises(ParameterError):
            TweedieParams(1.0, 1.0, 2.0)
        with self.assertRaises(ParameterError):
            TweedieParams(1.0, 0.0, 1.5)
        with self.assertRaises(ParameterError):
            TweedieParams(-1.0, 1.0, 1.5)

    def test_to_compound_example(self):
        """Test mu=2, phi=1, rho=1.5 maps to lambda=2 sqrt 2, alpha=1, beta=sqrt 2"""
        c = to_compound(TweedieParams(2.0, 1.0, 1.5))
        self.assertAlmostEqual(c.lam, 2.0 * math.sqrt(2.0), places=12)
        self.assertAlmostEqual(c.alpha, 1.0, places=12)
        self.assertAlmostEqual(c.beta, math.sqrt(2.0), places=12)
        self.assertAlmostEqual(c.lam * c.alpha / c.beta, 2.0, places=12)

    def test_from_compound_inverts(self):
        """Test from_compound recovers the original parameters"""
        p = TweedieParams(3.7, 0.4, 1.23)
        back = from_compound(to_compound(p))
        self.assertAlmostEqual(back.mu, p.mu, places=10)
        self.assertAlmostEqual(back.phi, p.phi, places=10)
        self.assertAlmostEqual(back.rho, p.rho, places=10)

    def test_round_trip_grid(self):
        """Test from_compound(to_compound(p)) returns p to relative 1e-12 on a random grid"""
        rng = np.random.default_rng(4)
        for mu, phi, rho in zip(rng.uniform(0.05, 20.0, 200), rng.uniform(0.1, 5.0, 200),
                                rng.uniform(1.05, 1.95, 200)):
            back = from_compound(to_compound(TweedieParams(mu, phi, rho)))
            np.testing.assert_allclose([back.mu, back.phi, back.rho], [mu, phi, rho], rtol=1e-12)

    def test_poisson_limit(self):
        """Test P(Y=0) approaches exp(-mu) as rho goes to 1 with phi = 1"""
        for mu in (0.2, 1.0, 2.0, 5.0):
            self.assertLess(abs(prob_zero(TweedieParams(mu, 1.0, 1.0 + 1e-6)) - math.exp(-mu)), 1e-4)

    def test_prob_zero_decreasing_in_mu(self):
        """Test P(Y=0) falls strictly as the mean grows"""
        for phi, rho in [(0.5, 1.1), (1.0, 1.5), (2.0, 1.9)]:
            values = [prob_zero(TweedieParams(mu, phi, rho)) for mu in np.linspace(0.1, 10.0, 50)]
            self.assertTrue((np.diff(values) < 0).all(), f"phi={phi} rho={rho}")

    def test_compound_params_validation(self):
        """Test nonpositive compound parameters raise"""
        with self.assertRaises(ParameterError):
            CompoundParams(0.0, 1.0, 1.0)

    def test_prob_zero(self):
        """Test P(Y=0) = exp(-lambda)"""
        p = TweedieParams(1.0, 1.0, 1.5)
        self.assertAlmostEqual(prob_zero(p), math.exp(-2.0), places=12)
        self.assertAlmostEqual(log_density(0.0, p), -2.0, places=12)

    def test_variance(self):
        """Test Var = phi mu^rho"""
        p = TweedieParams(2.0, 0.5, 1.5)
        self.assertAlmostEqual(p.variance, 0.5 * 2.0 ** 1.5)


class TestTruncation(unittest.TestCase):
    """Test the series truncation"""

    def test_term_counts(self):
        """Test term counts for three reference cells"""
        cases = [((1.0, 1.0, 1.5), 16), ((0.1, 0.5, 1.01), 2), ((10.0, 5.0, 1.5), 14)]
        for (y, phi, rho), expected in cases:
            ws = truncate_series(y, TweedieParams(1.0, phi, rho))
            self.assertLessEqual(abs(ws.n_terms - expected), 2, f"y={y} phi={phi} rho={rho}")

    def test_range_independent_of_mu(self):
        """Test the summation range does not depend on mu"""
        a = truncate_series(2.5, TweedieParams(0.3, 1.2, 1.4))
        b = truncate_series(2.5, TweedieParams(30.0, 1.2, 1.4))
        self.assertEqual((a.j_lo, a.j_hi), (b.j_lo, b.j_hi))

    def test_range_contains_mode(self):
        """Test j_lo <= j_max <= j_hi and j_lo >= 1"""
        for y in (0.01, 0.5, 3.0, 40.0):
            ws = truncate_series(y, TweedieParams(1.0, 0.7, 1.3))
            self.assertGreaterEqual(ws.j_lo, 1)
            self.assertLessEqual(ws.j_lo, ws.j_max)
            self.assertLessEqual(ws.j_max, ws.j_hi)

    def test_log_terms_concave(self):
        """Test log V(j) has nonpositive second differences over the kept range"""
        for y, phi, rho in [(1.0, 1.0, 1.5), (10.0, 5.0, 1.5), (25.0, 0.3, 1.2), (0.5, 2.0, 1.9)]:
            ws = truncate_series(y, TweedieParams(1.0, phi, rho))
            j = np.arange(max(1, ws.j_lo - 5), ws.j_hi + 6)
            self.assertTrue((np.diff(ws.log_v(j), 2) <= 1e-12).all(), f"y={y} phi={phi} rho={rho}")

    def test_nonpositive_y_rejected(self):
        """Test truncate_series needs y > 0"""
        with self.assertRaises(ParameterError):
            truncate_series(0.0, TweedieParams(1.0, 1.0, 1.5))

    def test_tail_bound_small(self):
        """Test the omitted mass is negligible next to the kept terms"""
        for y, phi, rho in [(1.0, 1.0, 1.5), (10.0, 5.0, 1.5), (25.0, 0.3, 1.2)]:
            ws = truncate_series(y, TweedieParams(1.0, phi, rho))
            kept = float(logsumexp(ws.log_terms()))
            self.assertLess(truncation_tail_bound(ws), kept - 30.0)

    def test_z_overflow(self):
        """Test z raises when it leaves the float range"""
        ws = TruncationWorkspace(log_z=800.0, alpha=1.0, c_w=0.0, j_max=1, j_lo=1, j_hi=2)
        with self.assertRaises(NumericRangeError):
            _ = ws.z


class TestDensity(unittest.TestCase):
    """Test the log-density"""

    def test_normalization_grid(self):
        """Test P(Y=0) plus the integral of the density is 1 on a parameter grid"""
        for mu in (0.5, 1.0, 2.0):
            for phi in (0.5, 1.0, 2.0):
                for rho in (1.1, 1.5, 1.9):
                    p = TweedieParams(mu, phi, rho)
                    upper = mu + 40.0 * math.sqrt(phi * mu ** rho)
                    total = prob_zero(p) + _positive_mass(p, 0.0, upper)
                    self.assertAlmostEqual(total, 1.0, delta=1e-6, msg=f"{mu}, {phi}, {rho}")

    def test_negative_y_rejected(self):
        """Test negative observations raise"""
        with self.assertRaises(ParameterError):
            log_density(-1.0, TweedieParams(1.0, 1.0, 1.5))

    def test_tensor_matches_scalar(self):
        """Test the vectorized log-likelihood agrees with log_density"""
        y = np.array([0.0, 0.3, 1.0, 4.0, 0.0, 12.0])
        mu = np.array([0.5, 1.0, 2.0, 3.0, 0.1, 8.0])
        values = tweedie_log_prob(torch.as_tensor(y), torch.as_tensor(mu),
                                  torch.tensor(0.8, dtype=torch.float64),
                                  torch.tensor(1.35, dtype=torch.float64))
        for i in range(len(y)):
            expected = log_density(y[i], TweedieParams(mu[i], 0.8, 1.35))
            self.assertAlmostEqual(float(values[i]), expected, places=9)

    def test_gradients_match_finite_differences(self):
        """Test exact partials against central differences on random configurations"""
        rng = np.random.default_rng(7)
        h = 1e-5
        for _ in range(50):
            mu = rng.uniform(0.2, 5.0)
            phi = rng.uniform(0.3, 3.0)
            rho = rng.uniform(1.1, 1.9)
            y = 0.0 if rng.random() < 0.2 else rng.uniform(0.1, 10.0)
            grads = log_density_grad(y, TweedieParams(mu, phi, rho))
            for k, (name, base) in enumerate([("mu", mu), ("phi", phi), ("rho", rho)]):
                up = dict(mu=mu, phi=phi, rho=rho)
                down = dict(mu=mu, phi=phi, rho=rho)
                up[name] = base + h
                down[name] = base - h
                fd = (log_density(y, TweedieParams(**up)) - log_density(y, TweedieParams(**down))) / (2 * h)
                self.assertLessEqual(abs(grads[k] - fd), 1e-4 * max(1.0, abs(fd)),
                                     f"d/d{name} at y={y}, mu={mu}, phi={phi}, rho={rho}")


class TestApproximation(unittest.TestCase):
    """Test the Tweedie-loss approximation"""

    def test_differs_from_exact_by_log_a(self):
        """Test the exact density at phi=1 is the approximation plus a mu-free term"""
        y, rho = 2.0, 1.4
        gaps = [log_density(y, TweedieParams(mu, 1.0, rho)) - approx_log_density(y, mu, rho)
                for mu in (0.5, 3.0)]
        self.assertAlmostEqual(gaps[0], gaps[1], places=10)

    def test_normalized_form_integrates_to_one(self):
        """Test the negative-exponential form is a density"""
        value, _ = integrate.quad(lambda y: math.exp(approx_normalized_log_density(y, 2.0, 1.5)),
                                  0.0, math.inf)
        self.assertAlmostEqual(value, 1.0, places=8)

    def test_invalid_arguments(self):
        """Test mu and rho are validated"""
        with self.assertRaises(ParameterError):
            approx_log_density(1.0, 0.0, 1.5)
        with self.assertRaises(ParameterError):
            approx_normalized_log_density(1.0, 1.0, 2.5)


class TestSampling(unittest.TestCase):
    """Test compound Poisson-Gamma sampling"""

    def test_deterministic(self):
        """Test equal seeds give equal draws"""
        p = TweedieParams(1.0, 1.0, 1.5)
        np.testing.assert_array_equal(sample_tweedie(p, 100, 3), sample_tweedie(p, 100, 3))

    def test_zero_fraction(self):
        """Test the share of zeros matches P(Y=0) within 3 sigma"""
        p = TweedieParams(1.0, 1.0, 1.5)
        n = 200_000
        draws = sample_tweedie(p, n, 11)
        p0 = prob_zero(p)
        self.assertLess(abs(np.mean(draws == 0) - p0), 3 * math.sqrt(p0 * (1 - p0) / n))
        self.assertTrue((draws >= 0).all())

    def test_moments(self):
        """Test sample mean and variance against mu and phi mu^rho"""
        n = 200_000
        for p in (TweedieParams(1.0, 1.0, 1.5), TweedieParams(2.0, 0.5, 1.2), TweedieParams(0.3, 2.0, 1.8)):
            draws = sample_tweedie(p, n, 21)
            self.assertLess(abs(draws.mean() - p.mean), 4 * math.sqrt(p.variance / n), str(p))
            self.assertAlmostEqual(draws.var() / p.variance, 1.0, delta=0.05, msg=str(p))

    def _cdf_distance(self, p: TweedieParams, n: int, seed: int) -> float:
        draws = sample_tweedie(p, n, seed)
        positive = np.sort(draws[draws > 0])
        p0 = prob_zero(p)
        upper = p.mu + 40.0 * math.sqrt(p.phi * p.mu ** p.rho)
        grid = np.linspace(0.0, upper, 201)
        pieces = [_positive_mass(p, a, b) for a, b in zip(grid[:-1], grid[1:])]
        cdf = np.cumsum(pieces) / (1.0 - p0)
        empirical = np.searchsorted(positive, grid[1:], side="right") / positive.size
        return float(np.max(np.abs(cdf - empirical)))

    def test_positive_part_matches_density(self):
        """Test the sampled positive part against the integrated density"""
        self.assertLess(self._cdf_distance(TweedieParams(1.0, 1.0, 1.5), 50_000, 5), 0.015)

    @unittest.skipUnless(os.environ.get("IGP_SLOW"), "set IGP_SLOW=1 for the million-draw check")
    def test_positive_part_matches_density_large(self):
        """Test KS distance below 0.01 with a million draws"""
        for p in (TweedieParams(1.0, 1.0, 1.5), TweedieParams(2.0, 0.5, 1.2)):
            self.assertLess(self._cdf_distance(p, 1_000_000, 9), 0.01)


if __name__ == '__main__':
    unittest.main()
