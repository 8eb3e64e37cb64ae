"""
Observation likelihoods for the latent GP

Each likelihood maps the latent value f through the softplus link to a
positive parameter: the NegBin success count r = softplus(f), or the
Tweedie mean mu = softplus(f). Hyper-parameters (theta_lik) are scalars
shared by every time point of a series and are stored unconstrained.

NegBin convention: pmf(y) = Gamma(y + r) / (Gamma(r) y!) p^r (1 - p)^y,
so mean = r (1 - p) / p and variance = r (1 - p) / p^2, both linear in r.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List

import numpy as np
import torch
import torch.nn.functional as F

from src.exceptions import ParameterError
from src.tweedie import (approx_log_prob, sample_tweedie_array,
                         tweedie_log_prob)

logger = logging.getLogger(__name__)

PHI_FLOOR = 1e-6
LINK_FLOOR = 1e-10  # softplus underflows for very negative f
RHO_LO = 1.0 + 1e-4
RHO_HI = 2.0 - 1e-4


class LikelihoodKind(str, Enum):
    NEGBIN = "negbin"
    TWEEDIE = "tweedie"
    TWEEDIE_APPROX = "tweedie_approx"


def softplus(x: float) -> float:
    """Overflow-safe log(1 + e^x)"""
    return float(np.logaddexp(0.0, x))


def inverse_softplus(y: float) -> float:
    """x such that softplus(x) = y, for y > 0"""
    if y <= 0:
        raise ParameterError(f"softplus is positive, cannot invert {y}")
    return y + math.log(-math.expm1(-y))


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _scalar(value: float) -> torch.Tensor:
    return torch.tensor(value, dtype=torch.float64)


@dataclass
class LikelihoodSpec:
    """Likelihood kind plus its unconstrained hyper-parameters"""
    kind: LikelihoodKind
    theta: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, kind, p_succ: float = 0.5, phi: float = 1.0,
               rho: float = 1.5) -> "LikelihoodSpec":
        """
        Build a spec from constrained initial values

        Args:
            kind: LikelihoodKind or its string value
            p_succ: NegBin success probability
            phi: Tweedie dispersion
            rho: Tweedie power

        Returns:
            LikelihoodSpec with theta holding the unconstrained values
        """
        kind = LikelihoodKind(kind)
        if kind is LikelihoodKind.NEGBIN:
            if not 0.0 < p_succ < 1.0:
                raise ParameterError(f"p_succ must lie in (0, 1), got {p_succ}")
            theta = {"p_succ": _scalar(_logit(p_succ))}
        else:
            if not RHO_LO < rho < RHO_HI:
                raise ParameterError(f"rho must lie in ({RHO_LO}, {RHO_HI}), got {rho}")
            theta = {"rho": _scalar(_logit((rho - RHO_LO) / (RHO_HI - RHO_LO)))}
            if kind is LikelihoodKind.TWEEDIE:
                if phi <= PHI_FLOOR:
                    raise ParameterError(f"phi must exceed {PHI_FLOOR}, got {phi}")
                theta["phi"] = _scalar(inverse_softplus(phi - PHI_FLOOR))
        return cls(kind=kind, theta=theta)

    def constrained(self) -> Dict[str, torch.Tensor]:
        """Apply the fixed bijections to theta"""
        out = {}
        if "p_succ" in self.theta:
            out["p_succ"] = torch.sigmoid(self.theta["p_succ"])
        if "phi" in self.theta:
            out["phi"] = F.softplus(self.theta["phi"]) + PHI_FLOOR
        if "rho" in self.theta:
            out["rho"] = RHO_LO + (RHO_HI - RHO_LO) * torch.sigmoid(self.theta["rho"])
        return out

    def values(self) -> Dict[str, float]:
        return {name: float(value) for name, value in self.constrained().items()}

    def parameters(self) -> List[torch.Tensor]:
        return list(self.theta.values())

    def detached(self) -> "LikelihoodSpec":
        return LikelihoodSpec(self.kind, {k: v.detach().clone() for k, v in self.theta.items()})

    def log_prob(self, y: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        """
        Elementwise log p(y | softplus(f), theta)

        Args:
            y: Observations, shape (n,)
            f: Latent values, shape (..., n)

        Returns:
            Tensor with the shape of f
        """
        link = F.softplus(f).clamp_min(LINK_FLOOR)
        params = self.constrained()
        if self.kind is LikelihoodKind.NEGBIN:
            p = params["p_succ"]
            return (torch.lgamma(y + link) - torch.lgamma(link) - torch.lgamma(y + 1.0)
                    + link * torch.log(p) + y * torch.log1p(-p))
        if self.kind is LikelihoodKind.TWEEDIE:
            return tweedie_log_prob(y, link, params["phi"], params["rho"])
        return approx_log_prob(y, link, params["rho"])

    def mean(self, f: np.ndarray) -> np.ndarray:
        """Mean of the observation distribution at latent f"""
        link = np.maximum(np.logaddexp(0.0, np.asarray(f, dtype=np.float64)), LINK_FLOOR)
        if self.kind is LikelihoodKind.NEGBIN:
            p = self.values()["p_succ"]
            return link * (1.0 - p) / p
        return link

    def sample(self, f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One observation per latent value"""
        link = np.maximum(np.logaddexp(0.0, np.asarray(f, dtype=np.float64)), LINK_FLOOR)
        values = self.values()
        if self.kind is LikelihoodKind.NEGBIN:
            return rng.negative_binomial(link, values["p_succ"]).astype(np.float64)
        # the Tweedie-loss approximation is not a distribution; draw from
        # the Tweedie it truncates, with phi = 1
        phi = values.get("phi", 1.0)
        return sample_tweedie_array(link, phi, values["rho"], rng)


def _check_observation(spec: LikelihoodSpec, y: float):
    if y < 0:
        raise ParameterError(f"observations must be nonnegative, got {y}")
    if spec.kind is LikelihoodKind.NEGBIN and float(y) != math.floor(y):
        raise ParameterError(f"NegBin observations must be integer counts, got {y}")


def loglik_point(spec: LikelihoodSpec, y: float, f: float) -> float:
    """log p_lik(y | softplus(f), theta) for one observation"""
    _check_observation(spec, y)
    with torch.no_grad():
        value = spec.log_prob(torch.tensor([float(y)], dtype=torch.float64),
                              torch.tensor([float(f)], dtype=torch.float64))
    return float(value[0])


def loglik_grad_f(spec: LikelihoodSpec, y: float, f: float) -> float:
    """d/df of loglik_point; the softplus link contributes sigmoid(f)"""
    _check_observation(spec, y)
    f_t = torch.tensor([float(f)], dtype=torch.float64, requires_grad=True)
    value = spec.detached().log_prob(torch.tensor([float(y)], dtype=torch.float64), f_t).sum()
    (grad,) = torch.autograd.grad(value, f_t)
    return float(grad[0])


def series_loglik(spec: LikelihoodSpec, y, f) -> float:
    """Sum of per-point log-likelihoods of one series"""
    y = np.asarray(y, dtype=np.float64)
    for value in y:
        _check_observation(spec, value)
    with torch.no_grad():
        total = spec.log_prob(torch.as_tensor(y), torch.as_tensor(np.asarray(f, dtype=np.float64)))
    return float(total.sum())


def sample_obs(spec: LikelihoodSpec, f: float, n: int, rng_seed: int) -> np.ndarray:
    """n draws from the observation distribution at latent value f"""
    if n < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(rng_seed)
    return spec.sample(np.full(n, float(f)), rng)
