"""
Tweedie distribution with power 1 < rho < 2

Exact log-density by truncated series evaluation of A(y), its gradients,
compound Poisson-Gamma sampling, and the Tweedie-loss approximation
(A(y) = 1, phi = 1) used by the ablation model.

Truncation: the terms V(j) of A(y) are scanned outward from
j_max = round(y^(2-rho) / (phi (2-rho))) until they fall e^37 below V(j_max).
The scan uses exact log-gamma values; the Stirling form of the term slope
only enters the geometric tail bound. Truncation ranges depend on
(y, phi, rho) and never on mu.

Gradients: d/dmu, d/dphi and d/drho are all exact. They are obtained by
automatic differentiation of the truncated series with the truncation range
held fixed (the omitted terms are below e^-37 of the largest one).
"""

import math
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from scipy.special import gammaln, logsumexp

from src.exceptions import NumericRangeError, ParameterError

logger = logging.getLogger(__name__)

LOG_THRESHOLD = 37.0
MAX_TERMS = 100_000
_LOG_FLOAT_MAX = math.log(np.finfo(np.float64).max)


@dataclass(frozen=True)
class TweedieParams:
    """Mean / dispersion / power parametrization"""
    mu: float
    phi: float
    rho: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu > 0):
            raise ParameterError(f"Tweedie mean must be positive, got mu={self.mu}")
        if not (math.isfinite(self.phi) and self.phi > 0):
            raise ParameterError(f"Tweedie dispersion must be positive, got phi={self.phi}")
        if not 1.0 < self.rho < 2.0:
            raise ParameterError(f"Tweedie power must lie in (1, 2), got rho={self.rho}")

    @property
    def alpha(self) -> float:
        return (2.0 - self.rho) / (self.rho - 1.0)

    @property
    def mean(self) -> float:
        return self.mu

    @property
    def variance(self) -> float:
        return self.phi * self.mu ** self.rho


@dataclass(frozen=True)
class CompoundParams:
    """Poisson rate and Gamma shape/rate of the compound representation"""
    lam: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("lam", "alpha", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"Compound parameter {name} must be positive, got {value}")


@dataclass(frozen=True)
class TruncationWorkspace:
    """Summation range of A(y) for one (y, phi, rho)"""
    log_z: float
    alpha: float
    c_w: float
    j_max: int
    j_lo: int
    j_hi: int
    log_threshold: float = LOG_THRESHOLD

    @property
    def z(self) -> float:
        if self.log_z > _LOG_FLOAT_MAX:
            raise NumericRangeError(f"z overflows float64 (log z = {self.log_z:.1f})")
        return math.exp(self.log_z)

    @property
    def n_terms(self) -> int:
        return self.j_hi - self.j_lo + 1

    def log_v(self, j) -> np.ndarray:
        """log V(j) = j log z - log Gamma(1 + j) - log Gamma(alpha j)"""
        j = np.asarray(j, dtype=np.float64)
        return j * self.log_z - gammaln(j + 1.0) - gammaln(self.alpha * j)

    def log_terms(self) -> np.ndarray:
        return self.log_v(np.arange(self.j_lo, self.j_hi + 1))

    def stirling_slope(self, j: float) -> float:
        """Stirling approximation of d log V / dj"""
        return self.log_z - math.log(j) - self.alpha * math.log(self.alpha * j)


def to_compound(p: TweedieParams) -> CompoundParams:
    """Map (mu, phi, rho) to the compound Poisson-Gamma (lambda, alpha, beta)"""
    lam = p.mu ** (2.0 - p.rho) / (p.phi * (2.0 - p.rho))
    beta = 1.0 / (p.phi * (p.rho - 1.0) * p.mu ** (p.rho - 1.0))
    return CompoundParams(lam=lam, alpha=p.alpha, beta=beta)


def from_compound(c: CompoundParams) -> TweedieParams:
    """Inverse of to_compound"""
    rho = (c.alpha + 2.0) / (c.alpha + 1.0)
    mu = c.lam * c.alpha / c.beta
    phi = mu ** (2.0 - rho) / (c.lam * (2.0 - rho))
    return TweedieParams(mu=mu, phi=phi, rho=rho)


def prob_zero(p: TweedieParams) -> float:
    """P(Y = 0) = exp(-lambda)"""
    return math.exp(-to_compound(p).lam)


def _log_z(y: np.ndarray, phi: float, rho: float) -> np.ndarray:
    alpha = (2.0 - rho) / (rho - 1.0)
    return (alpha * np.log(y) - alpha * math.log(rho - 1.0)
            - (1.0 + alpha) * math.log(phi) - math.log(2.0 - rho))


def _log_v(j: np.ndarray, log_z: np.ndarray, alpha: float) -> np.ndarray:
    return j * log_z - gammaln(j + 1.0) - gammaln(alpha * j)


def term_ranges(y, phi: float, rho: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized j-scan for positive observations

    Args:
        y: Positive observations
        phi: Dispersion
        rho: Power in (1, 2)

    Returns:
        (j_max, j_lo, j_hi) integer arrays, one entry per observation
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    alpha = (2.0 - rho) / (rho - 1.0)
    log_z = _log_z(y, phi, rho)
    with np.errstate(over="ignore"):
        j_mode = y ** (2.0 - rho) / (phi * (2.0 - rho))
    if not (np.all(np.isfinite(log_z)) and np.all(np.isfinite(j_mode))):
        raise NumericRangeError(f"Tweedie series out of range for phi={phi}, rho={rho}")

    j_max = np.maximum(1.0, np.rint(j_mode))
    log_v_max = _log_v(j_max, log_z, alpha)

    j_hi = j_max.copy()
    active = np.ones(y.shape, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        j_hi[idx] += 1.0
        gap = log_v_max[idx] - _log_v(j_hi[idx], log_z[idx], alpha)
        active[idx[gap >= LOG_THRESHOLD]] = False
        if np.any(j_hi[idx] - j_max[idx] > MAX_TERMS):
            raise NumericRangeError("Tweedie series needs more than MAX_TERMS terms")

    j_lo = j_max.copy()
    active = j_lo > 1.0
    while active.any():
        idx = np.flatnonzero(active)
        j_lo[idx] -= 1.0
        gap = log_v_max[idx] - _log_v(j_lo[idx], log_z[idx], alpha)
        active[idx[(gap >= LOG_THRESHOLD) | (j_lo[idx] <= 1.0)]] = False

    return j_max.astype(np.int64), j_lo.astype(np.int64), j_hi.astype(np.int64)


def truncate_series(y: float, p: TweedieParams) -> TruncationWorkspace:
    """
    Find the summation range [j_lo, j_hi] for A(y)

    Raises:
        ParameterError: if y is not positive
        NumericRangeError: if z or j_max leave the float64 range
    """
    if not y > 0:
        raise ParameterError(f"truncate_series needs y > 0, got {y}")
    j_max, j_lo, j_hi = term_ranges(y, p.phi, p.rho)
    log_z = float(_log_z(np.array([y]), p.phi, p.rho)[0])
    alpha = p.alpha
    c_w = log_z + (1.0 + alpha) - alpha * math.log(alpha)
    return TruncationWorkspace(log_z=log_z, alpha=alpha, c_w=c_w,
                               j_max=int(j_max[0]), j_lo=int(j_lo[0]), j_hi=int(j_hi[0]))


def truncation_tail_bound(ws: TruncationWorkspace) -> float:
    """
    Log of the geometric bound on the terms omitted from A(y)

    The ratio of successive terms moving away from the maximum is taken
    from the Stirling slope at j_lo - 1 and j_hi + 1.

    Returns:
        log of the bound, in the same units as log V(j); -inf when nothing
        is omitted below j_lo, inf when a ratio is not below 1
    """
    parts = []
    j_up = ws.j_hi + 1
    r_up = math.exp(ws.stirling_slope(j_up))
    if r_up >= 1.0:
        return math.inf
    parts.append(float(ws.log_v(j_up)) - math.log1p(-r_up))

    if ws.j_lo > 1:
        j_down = ws.j_lo - 1
        r_down = math.exp(-ws.stirling_slope(j_down))
        if r_down >= 1.0:
            return math.inf
        n = j_down
        log_geom = math.log1p(-r_down ** n) - math.log1p(-r_down)
        parts.append(float(ws.log_v(j_down)) + log_geom)
    return float(logsumexp(parts))


def log_density(y: float, p: TweedieParams) -> float:
    """
    Log of the Tweedie mass at 0 or density at y > 0

    Args:
        y: Nonnegative observation
        p: Tweedie parameters

    Returns:
        log P(Y = 0) for y = 0, log p(y) otherwise
    """
    if y < 0:
        raise ParameterError(f"Tweedie support is y >= 0, got {y}")
    if y == 0:
        return -to_compound(p).lam
    ws = truncate_series(y, p)
    log_a = float(logsumexp(ws.log_terms())) - math.log(y)
    exponent = (y * p.mu ** (1.0 - p.rho) / (1.0 - p.rho)
                - p.mu ** (2.0 - p.rho) / (2.0 - p.rho)) / p.phi
    return log_a + exponent


def tweedie_log_prob(y: torch.Tensor, mu: torch.Tensor,
                     phi: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """
    Differentiable elementwise Tweedie log-likelihood

    Args:
        y: Observations, shape (n,)
        mu: Means, shape (..., n)
        phi: Scalar dispersion tensor
        rho: Scalar power tensor

    Returns:
        Tensor broadcast to mu's shape
    """
    positive = y > 0
    exponent = (y * mu.pow(1.0 - rho) / (1.0 - rho) - mu.pow(2.0 - rho) / (2.0 - rho)) / phi
    if not bool(positive.any()):
        return exponent
    y_safe = torch.where(positive, y, torch.ones_like(y))
    log_a = _log_a_tensor(y_safe, phi, rho)
    return exponent + torch.where(positive, log_a, torch.zeros_like(log_a))


def _log_a_tensor(y: torch.Tensor, phi: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    _, j_lo, j_hi = term_ranges(y.detach().cpu().numpy(), float(phi), float(rho))
    j = torch.arange(int(j_lo.min()), int(j_hi.max()) + 1, dtype=y.dtype)
    alpha = (2.0 - rho) / (rho - 1.0)
    log_z = (alpha * torch.log(y) - alpha * torch.log(rho - 1.0)
             - (1.0 + alpha) * torch.log(phi) - torch.log(2.0 - rho))
    log_v = j * log_z[:, None] - torch.lgamma(j + 1.0) - torch.lgamma(alpha * j)
    lo = torch.as_tensor(j_lo)[:, None]
    hi = torch.as_tensor(j_hi)[:, None]
    in_range = (j >= lo) & (j <= hi)
    log_v = log_v.masked_fill(~in_range, -math.inf)
    return torch.logsumexp(log_v, dim=1) - torch.log(y)


def log_density_grad(y: float, p: TweedieParams) -> Tuple[float, float, float]:
    """Exact (d/dmu, d/dphi, d/drho) of log_density"""
    if y < 0:
        raise ParameterError(f"Tweedie support is y >= 0, got {y}")
    mu = torch.tensor(p.mu, dtype=torch.float64, requires_grad=True)
    phi = torch.tensor(p.phi, dtype=torch.float64, requires_grad=True)
    rho = torch.tensor(p.rho, dtype=torch.float64, requires_grad=True)
    value = tweedie_log_prob(torch.tensor([float(y)], dtype=torch.float64), mu, phi, rho).sum()
    d_mu, d_phi, d_rho = torch.autograd.grad(value, (mu, phi, rho))
    return float(d_mu), float(d_phi), float(d_rho)


def compound_draws(lam: np.ndarray, alpha: float, beta: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Sum of Poisson(lam) many Gamma(alpha, beta) variables, elementwise"""
    lam, beta = np.broadcast_arrays(np.asarray(lam, dtype=np.float64),
                                    np.asarray(beta, dtype=np.float64))
    counts = rng.poisson(lam)
    draws = np.zeros(lam.shape)
    hit = counts > 0
    # Gamma(n alpha, beta) is the sum of n independent Gamma(alpha, beta)
    draws[hit] = rng.gamma(shape=counts[hit] * alpha, scale=1.0 / beta[hit])
    return draws


def sample_tweedie(p: TweedieParams, n: int, rng_seed: int) -> np.ndarray:
    """
    Draw n samples by compound Poisson-Gamma simulation

    Args:
        p: Tweedie parameters
        n: Number of draws
        rng_seed: Seed; equal seeds give equal draws

    Returns:
        Array of nonnegative draws, exact zeros where the Poisson count is 0
    """
    if n < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    c = to_compound(p)
    rng = np.random.default_rng(rng_seed)
    return compound_draws(np.full(n, c.lam), c.alpha, np.full(n, c.beta), rng)


def sample_tweedie_array(mu: np.ndarray, phi: float, rho: float,
                         rng: np.random.Generator) -> np.ndarray:
    """One Tweedie draw per entry of mu"""
    mu = np.asarray(mu, dtype=np.float64)
    lam = mu ** (2.0 - rho) / (phi * (2.0 - rho))
    beta = 1.0 / (phi * (rho - 1.0) * mu ** (rho - 1.0))
    return compound_draws(lam, (2.0 - rho) / (rho - 1.0), beta, rng)


def _check_approx_args(mu: float, rho: float):
    if not mu > 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    if not 1.0 < rho < 2.0:
        raise ParameterError(f"rho must lie in (1, 2), got {rho}")


def approx_log_density(y: float, mu: float, rho: float) -> float:
    """Negated Tweedie loss: y mu^(1-rho)/(1-rho) - mu^(2-rho)/(2-rho)"""
    _check_approx_args(mu, rho)
    return y * mu ** (1.0 - rho) / (1.0 - rho) - mu ** (2.0 - rho) / (2.0 - rho)


def approx_normalized_log_density(y: float, mu: float, rho: float) -> float:
    """Log-density of the negative exponential obtained by normalizing approx_log_density"""
    _check_approx_args(mu, rho)
    rate = mu ** (1.0 - rho) / (rho - 1.0)
    return math.log(rate) - rate * y


def approx_log_prob(y: torch.Tensor, mu: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Tensor form of approx_log_density"""
    return y * mu.pow(1.0 - rho) / (1.0 - rho) - mu.pow(2.0 - rho) / (2.0 - rho)
