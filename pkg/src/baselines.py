"""
Reference forecasters

EmpQuant: empirical quantiles of the training values.
WSS: two-state Markov chain for demand occurrence plus jittered bootstrap
of past demand sizes.
ADIDA_C: temporal aggregation, naive forecast, uniform disaggregation and
conformal intervals from in-sample residuals.
"""

import math
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.config import QUANTILE_LEVELS
from src.exceptions import ParameterError
from src.metrics import QuantileForecast
from src.svgp import ForecastSamples
from src.utils import average_demand_interval, type1_quantiles

logger = logging.getLogger(__name__)


def _as_train(train) -> np.ndarray:
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 1 or train.shape[0] == 0:
        raise ParameterError("training series must be a nonempty vector")
    if (train < 0).any():
        raise ParameterError("training series must be nonnegative")
    return train


def empirical_quantiles(train, levels: Sequence[float] = QUANTILE_LEVELS,
                        horizon: int = 1) -> QuantileForecast:
    """
    Type-1 empirical quantiles of the training values, repeated over the horizon

    Args:
        train: Training values
        levels: Quantile levels
        horizon: Number of forecast steps

    Returns:
        QuantileForecast with identical rows and the training mean as point forecast
    """
    train = _as_train(train)
    row = type1_quantiles(train, levels)
    return QuantileForecast(tuple(levels), np.tile(row, (horizon, 1)),
                            np.full(horizon, train.mean()))


@dataclass(frozen=True)
class WssModel:
    """Occurrence chain and demand pool"""
    p01: float  # P(positive | previous zero)
    p10: float  # P(zero | previous positive)
    demand_pool: np.ndarray
    last_state: bool  # True when the last training value is positive

    def __post_init__(self):
        if not (0.0 <= self.p01 <= 1.0 and 0.0 <= self.p10 <= 1.0):
            raise ParameterError(f"transition probabilities out of range: {self.p01}, {self.p10}")


def wss_fit(train) -> WssModel:
    """Transition probabilities by add-one smoothed counts"""
    train = _as_train(train)
    occurred = train > 0
    prev, curr = occurred[:-1], occurred[1:]
    n00 = int(np.sum(~prev & ~curr))
    n01 = int(np.sum(~prev & curr))
    n10 = int(np.sum(prev & ~curr))
    n11 = int(np.sum(prev & curr))
    return WssModel(p01=(n01 + 1) / (n00 + n01 + 2),
                    p10=(n10 + 1) / (n10 + n11 + 2),
                    demand_pool=train[occurred].copy(),
                    last_state=bool(occurred[-1]))


def jitter(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """1 + floor(x + z sqrt(x)), falling back to x where that is not positive"""
    z = rng.standard_normal(values.shape)
    jittered = 1.0 + np.floor(values + z * np.sqrt(values))
    return np.where(jittered <= 0, values, jittered)


def wss_forecast(model: WssModel, h: int, n_samples: int = 50_000,
                 rng_seed: int = 0) -> ForecastSamples:
    """
    Simulate the occurrence chain h steps from the last state and bootstrap demand sizes

    Args:
        model: Fitted WSS model
        h: Horizon
        n_samples: Number of sample paths
        rng_seed: Seed

    Returns:
        ForecastSamples of integer demands
    """
    if h < 1 or n_samples < 1:
        raise ParameterError(f"need h >= 1 and n_samples >= 1, got {h}, {n_samples}")
    draws = np.zeros((n_samples, h))
    if model.demand_pool.size == 0:
        return ForecastSamples(draws, 1.0, True)
    rng = np.random.default_rng(rng_seed)
    state = np.full(n_samples, model.last_state)
    for step in range(h):
        u = rng.random(n_samples)
        state = np.where(state, u >= model.p10, u < model.p01)
        n_pos = int(state.sum())
        if n_pos:
            sizes = rng.choice(model.demand_pool, size=n_pos, replace=True)
            draws[state, step] = jitter(sizes, rng)
    return ForecastSamples(draws, 1.0, True)


@dataclass(frozen=True)
class AdidaModel:
    """Aggregation size, naive point forecast and conformal residuals"""
    bucket: int
    point: float
    residual_pool: np.ndarray

    def __post_init__(self):
        if self.bucket < 1:
            raise ParameterError(f"bucket must be at least 1, got {self.bucket}")


def adida_bucket(train) -> int:
    """ceil of the average demand interval, capped at T/2, at least 1"""
    train = _as_train(train)
    adi = average_demand_interval(train)
    cap = max(1, train.shape[0] // 2)
    if math.isinf(adi):
        return cap
    return int(min(max(1, math.ceil(adi)), cap))


def adida_fit(train) -> AdidaModel:
    """Aggregate into trailing buckets and collect one-step disaggregated residuals"""
    train = _as_train(train)
    bucket = adida_bucket(train)
    n_buckets = train.shape[0] // bucket
    tail = train[train.shape[0] - n_buckets * bucket:].reshape(n_buckets, bucket)
    aggregates = tail.sum(axis=1)
    # the naive forecast for bucket k is bucket k-1, spread evenly
    previous = np.repeat(aggregates[:-1] / bucket, bucket)
    residuals = tail[1:].ravel() - previous
    return AdidaModel(bucket=bucket, point=float(aggregates[-1] / bucket), residual_pool=residuals)


def adida_forecast(train, h: int, levels: Sequence[float] = QUANTILE_LEVELS,
                   rng_seed: int = 0) -> QuantileForecast:
    """
    ADIDA point forecast with conformal quantiles

    Args:
        train: Training values
        h: Horizon
        levels: Quantile levels
        rng_seed: Unused; ADIDA is deterministic

    Returns:
        QuantileForecast, point forecast plus residual quantiles floored at 0
    """
    if h < 1:
        raise ParameterError(f"horizon must be at least 1, got {h}")
    model = adida_fit(train)
    if model.residual_pool.size:
        offsets = type1_quantiles(model.residual_pool, levels)
    else:
        offsets = np.zeros(len(levels))
    row = np.maximum(model.point + offsets, 0.0)
    logger.debug(f"ADIDA bucket {model.bucket}, point {model.point:.3f}, "
                 f"{model.residual_pool.size} residuals")
    return QuantileForecast(tuple(levels), np.tile(row, (h, 1)), np.full(h, model.point))
