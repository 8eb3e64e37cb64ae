"""
Model registry

Every model, GP or baseline, is wrapped into a Forecaster that turns one
SeriesRecord and a seed into a QuantileForecast over the horizon.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from src.baselines import adida_forecast, empirical_quantiles, wss_fit, wss_forecast
from src.config import ForecastConfig, TrainConfig
from src.data import ScaleInfo, SeriesRecord, scale_series
from src.exceptions import ConfigError
from src.likelihoods import LikelihoodKind, LikelihoodSpec
from src.metrics import QuantileForecast
from src.svgp import FitReport, fit, forecast

logger = logging.getLogger(__name__)


def split_seed(seed: int) -> List[int]:
    """Independent seeds for training and for forecast sampling"""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(2)]


@dataclass
class Forecaster:
    """Base class: a named model producing quantile forecasts"""
    name: str
    forecast_cfg: ForecastConfig = field(default_factory=ForecastConfig)

    def predict(self, record: SeriesRecord, seed: int) -> QuantileForecast:
        raise NotImplementedError

    @property
    def last_report(self) -> Optional[FitReport]:
        return None


@dataclass
class EmpiricalQuantileForecaster(Forecaster):
    def predict(self, record: SeriesRecord, seed: int) -> QuantileForecast:
        return empirical_quantiles(record.train, self.forecast_cfg.levels, record.horizon)


@dataclass
class WssForecaster(Forecaster):
    def predict(self, record: SeriesRecord, seed: int) -> QuantileForecast:
        samples = wss_forecast(wss_fit(record.train), record.horizon,
                               self.forecast_cfg.n_samples, seed)
        return QuantileForecast.from_samples(samples.draws, self.forecast_cfg.levels)


@dataclass
class AdidaForecaster(Forecaster):
    def predict(self, record: SeriesRecord, seed: int) -> QuantileForecast:
        return adida_forecast(record.train, record.horizon, self.forecast_cfg.levels, seed)


@dataclass
class GPForecaster(Forecaster):
    """Sparse variational GP with a NegBin or Tweedie-family likelihood"""
    kind: LikelihoodKind = LikelihoodKind.TWEEDIE
    scale: bool = True
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    _report: Optional[FitReport] = field(default=None, repr=False)

    def predict(self, record: SeriesRecord, seed: int) -> QuantileForecast:
        fit_seed, sample_seed = split_seed(seed)
        if self.scale:
            train, info = scale_series(record.train)
        else:
            train, info = record.train, ScaleInfo()
        model = fit(train, record.train_times, LikelihoodSpec.create(self.kind),
                    replace(self.train_cfg, rng_seed=fit_seed))
        self._report = model.report
        if model.report.restarts:
            logger.warning(f"{self.name} on {record.item_id}: {model.report.restarts} restart(s)")
        samples = forecast(model, record.test_times, self.forecast_cfg.n_samples,
                           round_counts=True, rng_seed=sample_seed, scale_factor=info.factor)
        return QuantileForecast.from_samples(samples.draws, self.forecast_cfg.levels)

    @property
    def last_report(self) -> Optional[FitReport]:
        return self._report


BASELINE_MODELS = ["EmpQuant", "WSS", "ADIDA_C"]
GP_MODELS = {
    "NegBinGP": (LikelihoodKind.NEGBIN, False),
    "TweedieGP": (LikelihoodKind.TWEEDIE, True),
    "TweedieGP-noscale": (LikelihoodKind.TWEEDIE, False),
    "TweedieGP-approx": (LikelihoodKind.TWEEDIE_APPROX, True),
}
ABLATION_MODELS = ["TweedieGP", "TweedieGP-noscale", "TweedieGP-approx"]
MODEL_NAMES = BASELINE_MODELS + list(GP_MODELS)


def build_forecaster(name: str, train_cfg: Optional[TrainConfig] = None,
                     forecast_cfg: Optional[ForecastConfig] = None) -> Forecaster:
    """
    Create a forecaster by registry name

    Args:
        name: One of MODEL_NAMES
        train_cfg: Training settings for GP models
        forecast_cfg: Sampling and level settings

    Returns:
        Forecaster instance

    Raises:
        ConfigError: for unknown names
    """
    forecast_cfg = forecast_cfg or ForecastConfig()
    if name == "EmpQuant":
        return EmpiricalQuantileForecaster(name, forecast_cfg)
    if name == "WSS":
        return WssForecaster(name, forecast_cfg)
    if name == "ADIDA_C":
        return AdidaForecaster(name, forecast_cfg)
    if name in GP_MODELS:
        kind, scale = GP_MODELS[name]
        return GPForecaster(name, forecast_cfg, kind=kind, scale=scale,
                            train_cfg=train_cfg or TrainConfig())
    raise ConfigError(f"unknown model '{name}', choose from {', '.join(MODEL_NAMES)}")


def build_forecasters(names: List[str], train_cfg: Optional[TrainConfig] = None,
                      forecast_cfg: Optional[ForecastConfig] = None) -> Dict[str, Forecaster]:
    return {name: build_forecaster(name, train_cfg, forecast_cfg) for name in names}
