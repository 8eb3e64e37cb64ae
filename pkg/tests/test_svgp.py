"""
Tests for the sparse variational GP trainer and forecaster
"""

import math
import unittest
import warnings
from unittest import mock

import numpy as np
import torch

import src.svgp as svgp
from src.config import TrainConfig
from src.data import scale_series
from src.exceptions import NotPositiveDefiniteError, TrainingFailedError
from src.gp_core import (KernelParams, LatentGaussian, MeanParams, cholesky_psd,
                         kl_gaussians)
from src.likelihoods import LikelihoodKind, LikelihoodSpec, softplus
from src.svgp import (FittedModel, FitReport, VariationalState, elbo, elbo_grad,
                      fit, forecast, init_inducing, kl_term, named_parameters)
from src.tweedie import TweedieParams, prob_zero


def _toy_setup(kind: LikelihoodKind, seed: int):
    rng = np.random.default_rng(seed)
    t = np.arange(1.0, 6.0)
    y = np.array([0.0, 1.0, 0.0, 2.0, 0.0])
    factor = np.tril(rng.normal(scale=0.2, size=(5, 5)), -1) + np.diag(rng.uniform(0.5, 1.0, 5))
    state = VariationalState.from_factor(t + rng.normal(scale=0.1, size=5),
                                         rng.normal(scale=0.5, size=5), factor)
    kp = KernelParams.create(lengthscale=rng.uniform(1.0, 3.0), outputscale=rng.uniform(0.5, 1.5))
    mp = MeanParams.create(rng.normal(scale=0.3))
    lik = LikelihoodSpec.create(kind, p_succ=rng.uniform(0.3, 0.7), phi=rng.uniform(0.7, 1.5),
                                rho=rng.uniform(1.2, 1.8))
    return state, kp, mp, lik, (t, y)


class _GaussianNoise:
    """Gaussian observation noise, for checks with a closed-form posterior"""

    def __init__(self, variance: float):
        self.variance = variance

    def log_prob(self, y: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        return -0.5 * ((y - f) ** 2 / self.variance + math.log(2 * math.pi * self.variance))


class TestInducing(unittest.TestCase):
    """Test inducing point initialization"""

    def test_short_series_uses_all_inputs(self):
        """Test T <= 200 keeps every training input"""
        t = np.arange(1.0, 46.0)
        np.testing.assert_array_equal(init_inducing(t), t)

    def test_long_series_samples_200(self):
        """Test T > 200 samples 200 distinct sorted inputs"""
        t = np.arange(1.0, 1942.0)
        z = init_inducing(t, rng_seed=3)
        self.assertEqual(len(z), 200)
        self.assertEqual(len(np.unique(z)), 200)
        self.assertTrue((np.diff(z) > 0).all())
        self.assertTrue(set(z) <= set(t))

    def test_favours_recent_inputs(self):
        """Test the second half of the series receives more inducing points"""
        t = np.arange(1.0, 2001.0)
        z = init_inducing(t, rng_seed=1)
        self.assertGreater(np.sum(z > 1000), np.sum(z <= 1000))


class TestVariationalState(unittest.TestCase):
    """Test the variational parametrization"""

    def test_from_factor_round_trip(self):
        """Test vs_factor reproduces the given factor"""
        L = np.array([[1.0, 0.0], [0.4, 0.3]])
        state = VariationalState.from_factor([1.0, 2.0], [0.0, 0.0], L)
        np.testing.assert_allclose(state.vs_factor.numpy(), L, atol=1e-12)

    def test_covariance_is_positive_definite(self):
        """Test arbitrary raw values give a positive definite S"""
        raw = torch.randn(4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        state = VariationalState(torch.arange(4.0, dtype=torch.float64),
                                 torch.zeros(4, dtype=torch.float64), raw)
        self.assertTrue(bool((torch.linalg.eigvalsh(state.covariance) > 0).all()))


class TestElbo(unittest.TestCase):
    """Test the ELBO estimate and its gradient"""

    def test_deterministic_given_seed(self):
        """Test equal seeds give equal estimates"""
        state, kp, mp, lik, data = _toy_setup(LikelihoodKind.TWEEDIE, 0)
        self.assertEqual(elbo(state, kp, mp, lik, data, 16, 5), elbo(state, kp, mp, lik, data, 16, 5))

    def test_kl_term_delegates(self):
        """Test the KL term equals kl_gaussians of the implied q(u) and p(u)"""
        state, kp, mp, _, _ = _toy_setup(LikelihoodKind.NEGBIN, 1)
        K = svgp.rbf_kernel(state.z, state.z, kp)
        Lz = cholesky_psd(K)
        L = state.vs_factor
        q = LatentGaussian(mp.c + Lz @ state.vm, (Lz @ L) @ (Lz @ L).T, scale_tril=Lz @ L)
        p = LatentGaussian(mp.c * torch.ones(5, dtype=torch.float64), K)
        self.assertAlmostEqual(float(kl_term(state, kp, mp)), float(kl_gaussians(q, p)), places=6)
        self.assertGreaterEqual(float(kl_term(state, kp, mp)), 0.0)

    def test_kl_term_unwhitened(self):
        """Test an unwhitened state is compared with the GP prior directly"""
        state, kp, mp, _, _ = _toy_setup(LikelihoodKind.NEGBIN, 1)
        state.whiten = False
        L = state.vs_factor
        q = LatentGaussian(state.vm, L @ L.T, scale_tril=L)
        p = LatentGaussian(mp.c * torch.ones(5, dtype=torch.float64),
                           svgp.rbf_kernel(state.z, state.z, kp))
        self.assertAlmostEqual(float(kl_term(state, kp, mp)), float(kl_gaussians(q, p)), places=10)

    def test_initial_state_is_prior(self):
        """Test the initial state has zero KL even on closely spaced inputs"""
        state = VariationalState.initial(np.arange(1.0, 46.0))
        kp = KernelParams.create(lengthscale=4.5, outputscale=1.0)
        self.assertAlmostEqual(float(kl_term(state, kp, MeanParams.create(0.0))), 0.0, places=8)

    def test_kl_independent_of_likelihood(self):
        """Test the KL term has no gradient with respect to theta_lik"""
        state, kp, mp, lik, _ = _toy_setup(LikelihoodKind.TWEEDIE, 2)
        state.vm.requires_grad_(True)
        theta = [v.requires_grad_(True) for v in lik.theta.values()]
        grads = torch.autograd.grad(kl_term(state, kp, mp), theta, allow_unused=True)
        self.assertTrue(all(g is None for g in grads))

    def test_variance_shrinks_with_samples(self):
        """Test the estimate spread falls as the number of draws grows"""
        state, kp, mp, lik, data = _toy_setup(LikelihoodKind.NEGBIN, 3)
        small = np.std([elbo(state, kp, mp, lik, data, 4, s) for s in range(40)])
        large = np.std([elbo(state, kp, mp, lik, data, 64, s) for s in range(40)])
        self.assertLess(large, small)

    def _check_gradient(self, kind: LikelihoodKind, seed: int):
        state, kp, mp, lik, data = _toy_setup(kind, seed)
        grads = elbo_grad(state, kp, mp, lik, data, 8, seed)
        h = 1e-6
        for name, tensor in named_parameters(state, kp, mp, lik).items():
            flat = tensor.view(-1)
            for i in range(flat.numel()):
                if name == "vs_raw" and i % 5 > i // 5:
                    continue  # strict upper part is unused
                original = float(flat[i])
                flat[i] = original + h
                up = elbo(state, kp, mp, lik, data, 8, seed)
                flat[i] = original - h
                down = elbo(state, kp, mp, lik, data, 8, seed)
                flat[i] = original
                fd = (up - down) / (2 * h)
                got = float(grads[name].view(-1)[i])
                self.assertLessEqual(abs(got - fd), 1e-3 * max(1.0, abs(fd)),
                                     f"{kind.value} seed {seed}: d/d{name}[{i}]")

    def test_gradient_matches_finite_differences(self):
        """Test every ELBO partial against central differences at a fixed seed"""
        for seed in range(3):
            for kind in LikelihoodKind:
                self._check_gradient(kind, seed)

    def test_gradient_covers_every_parameter(self):
        """Test the gradient record names every learnable tensor"""
        state, kp, mp, lik, data = _toy_setup(LikelihoodKind.TWEEDIE, 4)
        grads = elbo_grad(state, kp, mp, lik, data)
        self.assertEqual(set(grads), {"c", "raw_lengthscale", "raw_outputscale", "z", "vm",
                                      "vs_raw", "theta.phi", "theta.rho"})
        self.assertEqual(grads["vs_raw"].shape, (5, 5))

    def test_zero_mean_gradient_at_gaussian_posterior(self):
        """Test d ELBO / d vm vanishes when vm is the optimum of a Gaussian toy"""
        t = torch.arange(1.0, 6.0, dtype=torch.float64)
        y = torch.tensor([0.5, 1.5, -0.3, 0.8, 2.0], dtype=torch.float64)
        noise = 0.3
        kp = KernelParams.create(lengthscale=1.0, outputscale=1.2)
        mp = MeanParams.create(0.4)
        Lz = cholesky_psd(svgp.rbf_kernel(t, t, kp))
        W = torch.linalg.solve_triangular(Lz, svgp.rbf_kernel(t, t, kp), upper=False)
        vm = torch.linalg.solve(torch.eye(5, dtype=torch.float64) + W @ W.T / noise,
                                W @ (y - 0.4) / noise)
        state = VariationalState.from_factor(t, vm, 0.5 * np.eye(5))
        state.vm.requires_grad_(True)
        half = torch.randn(8, 5, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        eps = torch.cat([half, -half])  # antithetic draws
        value = svgp.elbo_tensor(state, kp, mp, _GaussianNoise(noise), t, y, eps)
        (grad,) = torch.autograd.grad(value, state.vm)
        np.testing.assert_allclose(grad.numpy(), np.zeros(5), atol=1e-8)

    def test_bounded_by_marginal_likelihood(self):
        """Test the ELBO of a fitted 5-point model stays below log p(y) from importance sampling"""
        t = np.arange(1.0, 6.0)
        y = np.array([0.0, 2.0, 0.0, 1.0, 3.0])
        model = fit(y, t, LikelihoodSpec.create(LikelihoodKind.NEGBIN), TrainConfig(rng_seed=2))
        bound = elbo(model.state, model.kernel, model.mean, model.likelihood, (t, y), 4096, 7)

        n = 200_000
        with torch.no_grad():
            L = cholesky_psd(svgp.rbf_kernel(t, t, model.kernel))
            eps = torch.randn(n, 5, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
            f = model.mean.c + eps @ L.T
            loglik = model.likelihood.log_prob(torch.as_tensor(y), f).sum(dim=1)
            log_ml = float(torch.logsumexp(loglik, 0) - math.log(n))
        self.assertLessEqual(bound, log_ml + 0.05)


class TestFit(unittest.TestCase):
    """Test training"""

    def test_zero_series_concentrates_at_zero(self):
        """Test a constant-zero series gives P(Y=0) above 0.9 at the training inputs"""
        t = np.arange(1.0, 31.0)
        model = fit(np.zeros(30), t, LikelihoodSpec.create(LikelihoodKind.TWEEDIE), TrainConfig())
        with torch.no_grad():
            mean, _ = svgp.predictive_marginals(model.state, model.kernel, model.mean, t)
        values = model.likelihood.values()
        for f in mean.numpy():
            mu = max(softplus(f), 1e-12)
            self.assertGreater(prob_zero(TweedieParams(mu, values["phi"], values["rho"])), 0.9)

    def test_poisson_series(self):
        """Test the posterior band of softplus(f) covers the Poisson rate and the ELBO rises"""
        rng = np.random.default_rng(0)
        y = rng.poisson(3.0, 100).astype(float)
        t = np.arange(1.0, 101.0)
        model = fit(y, t, LikelihoodSpec.create(LikelihoodKind.TWEEDIE), TrainConfig(rng_seed=1))
        with torch.no_grad():
            mean, var = svgp.predictive_marginals(model.state, model.kernel, model.mean, t)
        sd = np.sqrt(var.numpy())
        lo = np.logaddexp(0.0, mean.numpy() - 2 * sd)
        hi = np.logaddexp(0.0, mean.numpy() + 2 * sd)
        self.assertGreaterEqual(np.mean((lo <= 3.0) & (3.0 <= hi)), 0.5)
        trace = model.report.elbo_trace
        self.assertGreaterEqual(len(trace), 20)
        self.assertGreaterEqual(trace[19], trace[0])

    def test_fitted_kl_stays_small(self):
        """Test training on a short intermittent series keeps q(u) close to the prior scale"""
        rng = np.random.default_rng(11)
        values = rng.poisson(0.8, 45) * rng.integers(1, 4, 45)
        train, _ = scale_series(values.astype(float))
        model = fit(train, np.arange(1.0, 46.0), LikelihoodSpec.create(LikelihoodKind.TWEEDIE),
                    TrainConfig(rng_seed=3))
        with torch.no_grad():
            kl = float(kl_term(model.state, model.kernel, model.mean))
        self.assertLess(kl, 100.0)
        self.assertGreater(model.report.final_elbo, -200.0)

    def test_poisson_forecast_mean(self):
        """Test forecasts of an i.i.d. Poisson(3) series are centred near 3"""
        rng = np.random.default_rng(0)
        y = rng.poisson(3.0, 100).astype(float)
        model = fit(y, np.arange(1.0, 101.0), LikelihoodSpec.create(LikelihoodKind.TWEEDIE),
                    TrainConfig(rng_seed=1))
        samples = forecast(model, np.arange(101.0, 104.0), n_samples=20_000, rng_seed=2)
        for step_mean in samples.mean():
            self.assertLess(abs(step_mean - 3.0), 1.0)
        self.assertLess(float(np.quantile(samples.draws, 0.99)), 15.0)

    def test_deterministic(self):
        """Test equal seeds give identical ELBO trajectories"""
        y = np.array([0, 0, 3, 0, 1, 0, 0, 2, 0, 0], dtype=float)
        t = np.arange(1.0, 11.0)
        cfg = TrainConfig(max_iters=15, rng_seed=4)
        a = fit(y, t, LikelihoodSpec.create(LikelihoodKind.NEGBIN), cfg)
        b = fit(y, t, LikelihoodSpec.create(LikelihoodKind.NEGBIN), cfg)
        self.assertEqual(a.report.elbo_trace, b.report.elbo_trace)

    def test_no_grad_tensor_conversion_warnings(self):
        """Test the training loop reads the ELBO without converting a graph tensor"""
        y = np.array([0, 2, 0, 1, 0, 0, 3, 0], dtype=float)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit(y, np.arange(1.0, 9.0), LikelihoodSpec.create(LikelihoodKind.NEGBIN),
                TrainConfig(max_iters=5))
        self.assertEqual([str(w.message) for w in caught if "requires_grad" in str(w.message)], [])

    def test_parameters_stay_valid(self):
        """Test constrained parameters remain in range after training"""
        y = np.array([0, 5, 0, 0, 9, 0, 1, 0], dtype=float)
        model = fit(y, np.arange(1.0, 9.0), LikelihoodSpec.create(LikelihoodKind.TWEEDIE),
                    TrainConfig(max_iters=30))
        values = model.likelihood.values()
        self.assertGreater(values["phi"], 0.0)
        self.assertTrue(1.0 < values["rho"] < 2.0)
        self.assertGreater(float(model.kernel.lengthscale), 0.0)
        self.assertLessEqual(model.report.iterations, 30)

    def test_restarts_exhausted(self):
        """Test non-finite losses restart and finally raise"""
        nan = torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)
        y = np.array([0.0, 1.0, 0.0, 2.0])
        with mock.patch("src.svgp.elbo_tensor", return_value=nan) as patched:
            with self.assertRaises(TrainingFailedError):
                fit(y, np.arange(1.0, 5.0), LikelihoodSpec.create(LikelihoodKind.NEGBIN),
                    TrainConfig(max_restarts=2))
        self.assertEqual(patched.call_count, 3)

    def test_restart_recovers(self):
        """Test a factorization failure triggers one restart and then succeeds"""
        real = svgp.elbo_tensor
        calls = {"n": 0}

        def flaky(*args):
            calls["n"] += 1
            if calls["n"] == 1:
                raise NotPositiveDefiniteError("forced")
            return real(*args)

        y = np.array([0.0, 1.0, 0.0, 2.0])
        with mock.patch("src.svgp.elbo_tensor", side_effect=flaky):
            model = fit(y, np.arange(1.0, 5.0), LikelihoodSpec.create(LikelihoodKind.NEGBIN),
                        TrainConfig(max_iters=5))
        self.assertEqual(model.report.restarts, 1)

    def test_short_series_rejected(self):
        """Test a single observation is not enough"""
        with self.assertRaises(ValueError):
            fit(np.array([1.0]), np.array([1.0]), LikelihoodSpec.create(LikelihoodKind.NEGBIN))


class TestForecast(unittest.TestCase):
    """Test forecast sampling"""

    @classmethod
    def setUpClass(cls):
        y = np.array([0, 2, 0, 0, 1, 0, 3, 0, 0, 1], dtype=float)
        cls.model = fit(y, np.arange(1.0, 11.0), LikelihoodSpec.create(LikelihoodKind.TWEEDIE),
                        TrainConfig(max_iters=20))

    def test_samples_nonnegative_and_rounded(self):
        """Test rounded draws are nonnegative integers of the right shape"""
        samples = forecast(self.model, np.arange(11.0, 15.0), n_samples=5000,
                           round_counts=True, rng_seed=1)
        self.assertEqual(samples.draws.shape, (5000, 4))
        self.assertTrue(samples.rounded)
        self.assertTrue((samples.draws >= 0).all())
        np.testing.assert_array_equal(samples.draws, np.round(samples.draws))

    def test_quantiles_monotone(self):
        """Test sample quantiles are nondecreasing in the level"""
        samples = forecast(self.model, np.arange(11.0, 14.0), n_samples=5000, rng_seed=2)
        q = samples.quantiles([0.5, 0.7, 0.9, 0.99])
        self.assertTrue((np.diff(q, axis=1) >= 0).all())

    def test_scale_factor_applied(self):
        """Test the scale factor multiplies the draws"""
        base = forecast(self.model, np.arange(11.0, 13.0), n_samples=1000, rng_seed=3)
        scaled = forecast(self.model, np.arange(11.0, 13.0), n_samples=1000, rng_seed=3,
                          scale_factor=4.0)
        np.testing.assert_allclose(scaled.draws, 4.0 * base.draws)
        self.assertEqual(scaled.scale_factor, 4.0)

    def test_shuffle_invariant_quantiles(self):
        """Test quantiles do not depend on the sample order"""
        samples = forecast(self.model, np.arange(11.0, 13.0), n_samples=2000, rng_seed=4)
        shuffled = svgp.ForecastSamples(np.random.default_rng(0).permutation(samples.draws))
        np.testing.assert_array_equal(samples.quantiles([0.5, 0.9]), shuffled.quantiles([0.5, 0.9]))

    def test_degenerate_latent_matches_likelihood(self):
        """Test a flat, nearly deterministic latent reproduces the likelihood marginals"""
        z = np.arange(1.0, 6.0)
        state = VariationalState.from_factor(z, np.full(5, 0.5), 1e-6 * np.eye(5))
        kernel = KernelParams.create(lengthscale=2.0, outputscale=1e-8)
        lik = LikelihoodSpec.create(LikelihoodKind.TWEEDIE, phi=1.0, rho=1.5)
        model = FittedModel(state, kernel, MeanParams.create(0.5), lik,
                            FitReport(0, 0.0, 0, False))
        samples = forecast(model, np.array([6.0, 7.0]), n_samples=100_000, rng_seed=5)
        mu = softplus(0.5)
        for step in range(2):
            draws = samples.draws[:, step]
            self.assertAlmostEqual(draws.mean(), mu, delta=0.02)
            self.assertAlmostEqual(np.mean(draws == 0), prob_zero(TweedieParams(mu, 1.0, 1.5)), delta=0.01)


if __name__ == '__main__':
    unittest.main()
