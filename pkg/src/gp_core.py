"""
Finite-dimensional Gaussian machinery

Constant mean, RBF kernel, jittered Cholesky, Gaussian conditioning,
KL divergence and the sparse variational predictive marginal. All tensors
are float64; solves go through triangular factors, never explicit inverses.
Time inputs are raw integer indices 1..T.
"""

import math
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from src.exceptions import NotPositiveDefiniteError, ParameterError
from src.likelihoods import inverse_softplus

if TYPE_CHECKING:
    from src.svgp import VariationalState

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BASE_JITTER = 1e-6
MAX_JITTER = 1e-2


def as_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@dataclass
class KernelParams:
    """RBF lengthscale and outputscale, stored through softplus"""
    raw_lengthscale: torch.Tensor
    raw_outputscale: torch.Tensor

    @classmethod
    def create(cls, lengthscale: float = 1.0, outputscale: float = 1.0) -> "KernelParams":
        if lengthscale <= 0 or outputscale <= 0:
            raise ParameterError(
                f"kernel parameters must be positive, got lengthscale={lengthscale}, "
                f"outputscale={outputscale}")
        return cls(torch.tensor(inverse_softplus(lengthscale), dtype=DTYPE),
                   torch.tensor(inverse_softplus(outputscale), dtype=DTYPE))

    @property
    def lengthscale(self) -> torch.Tensor:
        return F.softplus(self.raw_lengthscale)

    @property
    def outputscale(self) -> torch.Tensor:
        return F.softplus(self.raw_outputscale)

    def parameters(self):
        return [self.raw_lengthscale, self.raw_outputscale]

    def detached(self) -> "KernelParams":
        return KernelParams(self.raw_lengthscale.detach().clone(),
                            self.raw_outputscale.detach().clone())


@dataclass
class MeanParams:
    """Constant prior mean m(t) = c"""
    c: torch.Tensor

    @classmethod
    def create(cls, c: float = 0.0) -> "MeanParams":
        if not math.isfinite(c):
            raise ParameterError(f"prior mean must be finite, got {c}")
        return cls(torch.tensor(float(c), dtype=DTYPE))

    def parameters(self):
        return [self.c]

    def detached(self) -> "MeanParams":
        return MeanParams(self.c.detach().clone())


@dataclass
class LatentGaussian:
    """Mean vector and covariance of a finite GP marginal"""
    mean: torch.Tensor
    cov: torch.Tensor
    scale_tril: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.cov = as_tensor(self.cov)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ParameterError(f"covariance shape {tuple(self.cov.shape)} does not match mean length {n}")
        scale = max(1.0, float(self.cov.detach().abs().max())) if n else 1.0
        asym = float((self.cov - self.cov.T).detach().abs().max()) if n else 0.0
        if asym > 1e-10 * scale:
            raise ParameterError(f"covariance is not symmetric (max asymmetry {asym:.3e})")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def variance(self) -> torch.Tensor:
        return self.cov.diagonal()

    def factor(self) -> torch.Tensor:
        if self.scale_tril is not None:
            return self.scale_tril
        return cholesky_psd(self.cov)

    def marginal(self, indices: Sequence[int]) -> "LatentGaussian":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return LatentGaussian(self.mean[idx], self.cov[idx][:, idx])


def rbf_kernel(t1, t2, kp: KernelParams) -> torch.Tensor:
    """
    sigma^2 exp(-|t_i - t_j|^2 / (2 l^2)) for all pairs

    Args:
        t1: Time vector of length n
        t2: Time vector of length m
        kp: Kernel parameters

    Returns:
        n x m kernel matrix
    """
    t1 = as_tensor(t1)
    t2 = as_tensor(t2)
    sq = (t1[:, None] - t2[None, :]) ** 2
    return kp.outputscale * torch.exp(-0.5 * sq / kp.lengthscale ** 2)


def cholesky_psd(A: torch.Tensor, jitter: Optional[float] = None) -> torch.Tensor:
    """
    Lower Cholesky factor of A + jitter I, escalating jitter on failure

    Args:
        A: Symmetric matrix
        jitter: Initial jitter; defaults to 1e-6 times the mean diagonal

    Returns:
        Lower-triangular L with L L^T = A + jitter I

    Raises:
        NotPositiveDefiniteError: if factorization fails up to 1e-2 times the mean diagonal
    """
    A = as_tensor(A)
    n = A.shape[0]
    eye = torch.eye(n, dtype=DTYPE)
    diag_scale = float(A.detach().diagonal().mean()) if n else 1.0
    if not math.isfinite(diag_scale):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    diag_scale = diag_scale if diag_scale > 0 else 1.0
    current = BASE_JITTER * diag_scale if jitter is None else jitter
    while True:
        L, info = torch.linalg.cholesky_ex(A + current * eye)
        if int(info) == 0 and bool(torch.isfinite(L).all()):
            return L
        if current >= MAX_JITTER * diag_scale:
            break
        logger.debug(f"Cholesky failed with jitter {current:.1e}, escalating")
        current = min(current * 10.0, MAX_JITTER * diag_scale) if current > 0 else BASE_JITTER * diag_scale
    raise NotPositiveDefiniteError(f"matrix of size {n} not positive definite after jitter {current:.1e}")


def _solve_lower(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    return torch.linalg.solve_triangular(L, B, upper=False)


def condition(joint: LatentGaussian, n_a: int, observed_b) -> LatentGaussian:
    """
    Distribution of the first n_a components given the remaining ones

    Args:
        joint: Gaussian over the stacked vector (a, b)
        n_a: Size of the a block
        observed_b: Observed value of b

    Returns:
        LatentGaussian over a
    """
    if not 0 < n_a < joint.dim:
        raise ParameterError(f"partition size {n_a} invalid for dimension {joint.dim}")
    b = as_tensor(observed_b)
    if b.shape[0] != joint.dim - n_a:
        raise ParameterError(f"observed block has length {b.shape[0]}, expected {joint.dim - n_a}")
    mean_a, mean_b = joint.mean[:n_a], joint.mean[n_a:]
    cov_aa = joint.cov[:n_a, :n_a]
    cov_ab = joint.cov[:n_a, n_a:]
    L_bb = cholesky_psd(joint.cov[n_a:, n_a:])
    W = _solve_lower(L_bb, cov_ab.T)
    r = _solve_lower(L_bb, (b - mean_b)[:, None])
    mean = mean_a + (W.T @ r)[:, 0]
    cov = cov_aa - W.T @ W
    return LatentGaussian(mean, 0.5 * (cov + cov.T))


def kl_gaussians(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """Closed-form KL(q || p) between multivariate normals"""
    if q.dim != p.dim:
        raise ParameterError(f"dimension mismatch: {q.dim} vs {p.dim}")
    Lq = q.factor()
    Lp = p.factor()
    M = _solve_lower(Lp, Lq)
    d = _solve_lower(Lp, (p.mean - q.mean)[:, None])
    trace = (M ** 2).sum()
    maha = (d ** 2).sum()
    logdet = 2.0 * (torch.log(Lp.diagonal()).sum() - torch.log(Lq.diagonal().abs()).sum())
    kl = 0.5 * (trace + maha - q.dim + logdet)
    return torch.clamp(kl, min=0.0)


def _projection(vs: "VariationalState", kp: KernelParams, t_star) -> Tuple[torch.Tensor, torch.Tensor]:
    """W = Lz^-1 K_zs and the map from q's mean to the latent mean at t_star"""
    Lz = cholesky_psd(rbf_kernel(vs.z, vs.z, kp))
    W = _solve_lower(Lz, rbf_kernel(vs.z, t_star, kp))
    if vs.whiten:
        return W, W
    return W, torch.linalg.solve_triangular(Lz.T, W, upper=True)


def _centred_mean(vs: "VariationalState", mp: MeanParams) -> torch.Tensor:
    # whitened v has prior mean zero; u has prior mean c
    return vs.vm if vs.whiten else vs.vm - mp.c


def predictive_marginals(vs: "VariationalState", kp: KernelParams, mp: MeanParams,
                         t_star) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of q(f) at each of t_star, without the full covariance"""
    W, A_t = _projection(vs, kp, t_star)
    B = vs.vs_factor.T @ A_t
    mean = mp.c + A_t.T @ _centred_mean(vs, mp)
    var = kp.outputscale - (W ** 2).sum(0) + (B ** 2).sum(0)
    return mean, torch.clamp(var, min=1e-12)


def predictive_latent(vs: "VariationalState", kp: KernelParams, mp: MeanParams,
                      t_star) -> LatentGaussian:
    """
    Exact Gaussian q(f*) = integral p(f* | u) q(u) du

    For a whitened state u = c + Lz v with q(v) = N(vm, S), so the latent
    mean is c + W^T vm and the covariance K** - W^T W + W^T S W.

    Args:
        vs: Variational state (inducing inputs, mean, covariance factor)
        kp: Kernel parameters
        mp: Mean parameters
        t_star: Prediction times

    Returns:
        LatentGaussian over f at t_star
    """
    t_star = as_tensor(t_star)
    W, A_t = _projection(vs, kp, t_star)
    B = vs.vs_factor.T @ A_t
    mean = mp.c + A_t.T @ _centred_mean(vs, mp)
    cov = rbf_kernel(t_star, t_star, kp) - W.T @ W + B.T @ B
    return LatentGaussian(mean, 0.5 * (cov + cov.T))
