"""
Sparse variational GP trainer and forecaster

The inducing values are whitened: u = c + Lz v with Lz the Cholesky factor of
the prior covariance at the inducing inputs z, and q(v) = N(vm, S) with
S = L L^T. The prior on v is N(0, I), so the initial state vm = 0, L = I is
the prior itself however badly conditioned the kernel matrix is. The ELBO is
the Monte-Carlo expected log-likelihood under the marginals of q(f) at the
training inputs minus the exact KL(q(u) || p(u)) = KL(q(v) || N(0, I)).
Every learnable scalar (c, lengthscale, outputscale, theta_lik, z, vm, L) is
optimized jointly with Adam.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from src.config import TrainConfig
from src.exceptions import (NotPositiveDefiniteError, NumericRangeError,
                            ParameterError, TrainingFailedError)
from src.gp_core import (DTYPE, KernelParams, LatentGaussian, MeanParams,
                         as_tensor, cholesky_psd, kl_gaussians,
                         predictive_latent, predictive_marginals, rbf_kernel)
from src.likelihoods import LikelihoodSpec, inverse_softplus

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class VariationalState:
    """
    Inducing inputs and the variational distribution

    With whiten set, (vm, vs_factor) describe q(v) over the whitened inducing
    values; otherwise they describe q(u) directly.
    """
    z: torch.Tensor
    vm: torch.Tensor
    vs_raw: torch.Tensor  # strict lower part as is, diagonal through softplus
    whiten: bool = True

    @classmethod
    def initial(cls, z) -> "VariationalState":
        z = as_tensor(z).clone()
        m = z.shape[0]
        raw = torch.eye(m, dtype=DTYPE) * inverse_softplus(1.0)
        return cls(z=z, vm=torch.zeros(m, dtype=DTYPE), vs_raw=raw)

    @classmethod
    def from_factor(cls, z, vm, factor, whiten: bool = True) -> "VariationalState":
        """Build a state whose vs_factor equals the given lower-triangular factor"""
        factor = as_tensor(factor)
        diag = factor.diagonal()
        if bool((diag <= 0).any()):
            raise ParameterError("covariance factor needs a positive diagonal")
        raw = torch.tril(factor, -1) + torch.diag(torch.tensor(
            [inverse_softplus(float(d)) for d in diag], dtype=DTYPE))
        return cls(z=as_tensor(z).clone(), vm=as_tensor(vm).clone(), vs_raw=raw, whiten=whiten)

    @property
    def vs_factor(self) -> torch.Tensor:
        return torch.tril(self.vs_raw, -1) + torch.diag(F.softplus(self.vs_raw.diagonal()))

    @property
    def covariance(self) -> torch.Tensor:
        L = self.vs_factor
        return L @ L.T

    @property
    def n_inducing(self) -> int:
        return int(self.z.shape[0])

    def parameters(self) -> List[torch.Tensor]:
        return [self.z, self.vm, self.vs_raw]

    def detached(self) -> "VariationalState":
        return VariationalState(self.z.detach().clone(), self.vm.detach().clone(),
                                self.vs_raw.detach().clone(), self.whiten)


@dataclass
class FitReport:
    """Outcome of one fit"""
    iterations: int
    final_elbo: float
    restarts: int
    early_stopped: bool
    elbo_trace: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class FittedModel:
    """Trained parameters; immutable and safe to share for forecasting"""
    state: VariationalState
    kernel: KernelParams
    mean: MeanParams
    likelihood: LikelihoodSpec
    report: FitReport


@dataclass
class ForecastSamples:
    """N x h Monte-Carlo draws of the forecast distribution"""
    draws: np.ndarray
    scale_factor: float = 1.0
    rounded: bool = False

    @property
    def horizon(self) -> int:
        return int(self.draws.shape[1])

    def rescaled(self, factor: float) -> "ForecastSamples":
        return ForecastSamples(self.draws * factor, self.scale_factor * factor, self.rounded)

    def to_counts(self) -> "ForecastSamples":
        return ForecastSamples(np.rint(self.draws), self.scale_factor, True)

    def quantiles(self, levels) -> np.ndarray:
        """Type-1 empirical quantiles, shape h x len(levels)"""
        return np.quantile(self.draws, np.asarray(levels), axis=0, method="inverted_cdf").T

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


def init_inducing(t, m_cap: int = 200, rng_seed: int = 0) -> np.ndarray:
    """
    Initial inducing inputs

    Short series use every training input. Longer ones sample m_cap distinct
    inputs without replacement with probability proportional to
    log(1 + i / T), which favours recent observations.

    Args:
        t: Training time vector of length T
        m_cap: Maximum number of inducing points
        rng_seed: Seed for the sampling

    Returns:
        Sorted inducing inputs
    """
    t = np.asarray(t, dtype=np.float64)
    T = t.shape[0]
    if T < 1:
        raise ParameterError("need at least one training input")
    if T <= m_cap:
        return t.copy()
    weights = np.log1p(np.arange(1, T + 1) / T)
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(T, size=m_cap, replace=False, p=weights / weights.sum())
    return t[np.sort(idx)]


def _prior(state: VariationalState, kp: KernelParams, mp: MeanParams) -> LatentGaussian:
    m = state.n_inducing
    if state.whiten:
        eye = torch.eye(m, dtype=DTYPE)
        return LatentGaussian(torch.zeros(m, dtype=DTYPE), eye, scale_tril=eye)
    return LatentGaussian(mp.c * torch.ones(m, dtype=DTYPE), rbf_kernel(state.z, state.z, kp))


def kl_term(state: VariationalState, kp: KernelParams, mp: MeanParams) -> torch.Tensor:
    """KL(q(u) || p(u)), taken in whitened coordinates for a whitened state"""
    L = state.vs_factor
    q = LatentGaussian(state.vm, L @ L.T, scale_tril=L)
    return kl_gaussians(q, _prior(state, kp, mp))


def elbo_tensor(state: VariationalState, kp: KernelParams, mp: MeanParams,
                lik: LikelihoodSpec, t: torch.Tensor, y: torch.Tensor,
                eps: torch.Tensor) -> torch.Tensor:
    """ELBO for fixed standard-normal draws eps of shape (S, T)"""
    mean, var = predictive_marginals(state, kp, mp, t)
    f = mean + torch.sqrt(var) * eps
    expected = lik.log_prob(y, f).sum(dim=1).mean()
    return expected - kl_term(state, kp, mp)


def _draw_eps(mc_samples: int, n: int, rng_seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(int(rng_seed))
    return torch.randn(mc_samples, n, generator=generator, dtype=DTYPE)


def _check_data(t, y):
    t = as_tensor(t)
    y = as_tensor(y)
    if y.ndim != 1 or y.shape[0] == 0:
        raise ParameterError("training data must be a nonempty vector")
    if t.shape != y.shape:
        raise ParameterError(f"time vector length {t.shape[0]} != series length {y.shape[0]}")
    return t, y


def elbo(state: VariationalState, kp: KernelParams, mp: MeanParams, lik: LikelihoodSpec,
         data, mc_samples: int = 16, rng_seed: int = 0) -> float:
    """
    Monte-Carlo ELBO estimate

    Args:
        state: Variational state
        kp: Kernel parameters
        mp: Mean parameters
        lik: Likelihood spec
        data: (t, y) pair of training times and observations
        mc_samples: Draws per observation
        rng_seed: Seed; equal seeds give equal estimates

    Returns:
        The ELBO estimate
    """
    t, y = _check_data(*data)
    with torch.no_grad():
        value = elbo_tensor(state, kp, mp, lik, t, y, _draw_eps(mc_samples, y.shape[0], rng_seed))
    return float(value)


def named_parameters(state: VariationalState, kp: KernelParams, mp: MeanParams,
                     lik: LikelihoodSpec) -> Dict[str, torch.Tensor]:
    """Every learnable unconstrained tensor, keyed by name"""
    named = {
        "c": mp.c,
        "raw_lengthscale": kp.raw_lengthscale,
        "raw_outputscale": kp.raw_outputscale,
        "z": state.z,
        "vm": state.vm,
        "vs_raw": state.vs_raw,
    }
    for name, value in lik.theta.items():
        named[f"theta.{name}"] = value
    return named


def elbo_grad(state: VariationalState, kp: KernelParams, mp: MeanParams, lik: LikelihoodSpec,
              data, mc_samples: int = 16, rng_seed: int = 0) -> Dict[str, torch.Tensor]:
    """Gradient of the ELBO estimate at a fixed seed with respect to every learnable tensor"""
    t, y = _check_data(*data)
    state, kp, mp, lik = state.detached(), kp.detached(), mp.detached(), lik.detached()
    named = named_parameters(state, kp, mp, lik)
    for value in named.values():
        value.requires_grad_(True)
    value = elbo_tensor(state, kp, mp, lik, t, y, _draw_eps(mc_samples, y.shape[0], rng_seed))
    grads = torch.autograd.grad(value, list(named.values()), allow_unused=True)
    return {name: (torch.zeros_like(named[name]) if g is None else g)
            for name, g in zip(named, grads)}


class _NonFiniteLoss(Exception):
    pass


def fit(series, t, lik: LikelihoodSpec, cfg: Optional[TrainConfig] = None) -> FittedModel:
    """
    Train a sparse variational GP on one series

    Args:
        series: Training observations (already scaled if scaling applies)
        t: Training times
        lik: Likelihood spec holding the initial theta
        cfg: Training configuration

    Returns:
        FittedModel with state, kernel, mean, likelihood and FitReport

    Raises:
        TrainingFailedError: if every attempt hit a non-finite loss or a failed factorization
    """
    cfg = cfg or TrainConfig()
    t, y = _check_data(t, series)
    if y.shape[0] < 2:
        raise ParameterError("series needs at least 2 observations")
    if any(value.ndim != 0 for value in lik.theta.values()):
        raise ParameterError("likelihood hyper-parameters must be scalars shared by all time points")

    last_error = None
    for restart in range(cfg.max_restarts + 1):
        seed = cfg.rng_seed + restart
        try:
            return _fit_once(t, y, lik, cfg, seed, restart)
        except (_NonFiniteLoss, NotPositiveDefiniteError, NumericRangeError) as e:
            last_error = e
            logger.warning(f"Training attempt {restart + 1} failed ({e}); "
                           f"{cfg.max_restarts - restart} restart(s) left")
    raise TrainingFailedError(f"training failed after {cfg.max_restarts} restart(s): {last_error}")


def _fit_once(t: torch.Tensor, y: torch.Tensor, lik_init: LikelihoodSpec,
              cfg: TrainConfig, seed: int, restart: int) -> FittedModel:
    T = y.shape[0]
    state = VariationalState.initial(init_inducing(t.numpy(), cfg.max_inducing, seed))
    kp = KernelParams.create(lengthscale=max(2.0, T / 10.0), outputscale=1.0)
    mp = MeanParams.create(0.0)
    lik = lik_init.detached()
    params = list(named_parameters(state, kp, mp, lik).values())
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    generator = torch.Generator().manual_seed(int(seed))

    trace: List[float] = []
    best = -math.inf
    stall = 0
    early_stopped = False
    for _ in range(cfg.max_iters):
        eps = torch.randn(cfg.mc_samples, T, generator=generator, dtype=DTYPE)
        optimizer.zero_grad()
        value = elbo_tensor(state, kp, mp, lik, t, y, eps)
        if not bool(torch.isfinite(value)):
            raise _NonFiniteLoss(f"non-finite ELBO at iteration {len(trace) + 1}")
        (-value).backward()
        if any(p.grad is not None and not bool(torch.isfinite(p.grad).all()) for p in params):
            raise _NonFiniteLoss(f"non-finite gradient at iteration {len(trace) + 1}")
        optimizer.step()

        current = value.item()
        trace.append(current)
        improved = (not math.isfinite(best)
                    or current > best + cfg.min_rel_improvement * abs(best))
        if improved:
            best = current
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                early_stopped = True
                break

    report = FitReport(iterations=len(trace), final_elbo=trace[-1], restarts=restart,
                       early_stopped=early_stopped, elbo_trace=trace)
    logger.debug(f"Fit finished: {report.iterations} iterations, ELBO {report.final_elbo:.3f}, "
                 f"restarts {restart}")
    return FittedModel(state.detached(), kp.detached(), mp.detached(), lik.detached(), report)


def forecast(model: FittedModel, t_star, n_samples: int = 50_000, round_counts: bool = False,
             rng_seed: int = 0, scale_factor: float = 1.0) -> ForecastSamples:
    """
    Draw forecast samples without autoregression

    Each latent path is drawn from q(f*) jointly over the horizon; one
    observation vector is then drawn per latent path. Draws are multiplied
    by scale_factor before optional rounding.

    Args:
        model: Fitted model
        t_star: Future times
        n_samples: Number of sample paths
        round_counts: Round draws to integers
        rng_seed: Seed for latent and observation draws
        scale_factor: Factor undoing the training-time scaling

    Returns:
        ForecastSamples with n_samples x len(t_star) draws
    """
    with torch.no_grad():
        latent = predictive_latent(model.state, model.kernel, model.mean, t_star)
        L = cholesky_psd(latent.cov).numpy()
        mean = latent.mean.numpy()
    rng = np.random.default_rng(rng_seed)
    f = mean + rng.standard_normal((n_samples, mean.shape[0])) @ L.T
    samples = ForecastSamples(model.likelihood.sample(f, rng)).rescaled(scale_factor)
    return samples.to_counts() if round_counts else samples
