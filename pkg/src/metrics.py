"""
Forecast scoring

Quantile loss, scaled quantile loss (sQ_q), the scaled upper-tail ranked
probability score sRPS_0.5+, RMSSE and one-sided coverage, plus the
per-dataset ScoreTable and paired t-tests with Benjamini-Hochberg
correction. Scaled metrics whose in-sample denominator is zero are reported
as undefined (None) and counted per metric instead of being averaged.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from src.config import QUANTILE_LEVELS, SCORE_LEVELS
from src.exceptions import ParameterError
from src.utils import type1_quantiles

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-9
SRPS = "sRPS0.5+"
RMSSE = "RMSSE"


def sq_name(level: float) -> str:
    return f"sQ{level:g}"


def coverage_name(level: float) -> str:
    return f"coverage{level:g}"


@dataclass
class QuantileForecast:
    """h x |levels| quantile values, nondecreasing across levels"""
    levels: Tuple[float, ...]
    values: np.ndarray
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        self.levels = tuple(float(q) for q in self.levels)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.levels):
            raise ParameterError(
                f"quantile values shape {self.values.shape} does not match {len(self.levels)} levels")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ParameterError(f"levels must be strictly increasing: {self.levels}")
        if (self.values < 0).any():
            raise ParameterError("quantile forecasts must be nonnegative")
        if (np.diff(self.values, axis=1) < -MONOTONE_TOL).any():
            raise ParameterError("quantile forecasts must be nondecreasing in the level")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)

    @property
    def horizon(self) -> int:
        return int(self.values.shape[0])

    def at(self, level: float) -> np.ndarray:
        """Forecast path at one level"""
        for j, q in enumerate(self.levels):
            if math.isclose(q, level, abs_tol=1e-12):
                return self.values[:, j]
        raise ParameterError(f"level {level} not in forecast levels {self.levels}")

    def point(self) -> np.ndarray:
        """Forecast mean when known, else the median"""
        return self.mean if self.mean is not None else self.at(0.5)

    @classmethod
    def from_samples(cls, draws: np.ndarray, levels: Sequence[float] = QUANTILE_LEVELS) -> "QuantileForecast":
        """Type-1 quantiles of N x h sample paths"""
        draws = np.asarray(draws, dtype=np.float64)
        return cls(tuple(levels), type1_quantiles(draws, levels, axis=0).T, draws.mean(axis=0))


def quantile_loss(q: float, y_hat, y):
    """2 q (y - y_hat) if y >= y_hat else 2 (1 - q)(y_hat - y); elementwise"""
    if not 0.0 < q < 1.0:
        raise ParameterError(f"quantile level must lie in (0, 1), got {q}")
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = 2.0 * np.where(y >= y_hat, q * (y - y_hat), (1.0 - q) * (y_hat - y))
    return float(loss) if loss.ndim == 0 else loss


def _in_sample_loss(q: float, train: np.ndarray) -> float:
    emp = float(type1_quantiles(train, [q])[0])
    return float(np.mean(quantile_loss(q, emp, train)))


def scaled_quantile_loss(q: float, y_hat, test, train) -> Optional[float]:
    """
    Horizon-mean quantile loss scaled by the in-sample loss of the training empirical quantile

    Args:
        q: Quantile level
        y_hat: Forecast at level q over the horizon
        test: Observed test values
        train: Training values

    Returns:
        The scaled loss, or None when the denominator is zero
    """
    train = np.asarray(train, dtype=np.float64)
    denominator = _in_sample_loss(q, train)
    if denominator <= 0:
        return None
    return float(np.mean(quantile_loss(q, y_hat, test))) / denominator


def srps_half_plus(qf: QuantileForecast, test, train,
                   levels: Sequence[float] = QUANTILE_LEVELS) -> Optional[float]:
    """Mean quantile loss over the upper levels, scaled by the empirical-quantile analogue"""
    train = np.asarray(train, dtype=np.float64)
    denominator = float(np.mean([_in_sample_loss(q, train) for q in levels]))
    if denominator <= 0:
        return None
    numerator = float(np.mean([np.mean(quantile_loss(q, qf.at(q), test)) for q in levels]))
    return numerator / denominator


def rmsse(point, test, train) -> Optional[float]:
    """Root mean squared error scaled by the in-sample naive one-step squared error"""
    train = np.asarray(train, dtype=np.float64)
    if train.shape[0] < 2:
        return None
    denominator = float(np.mean(np.diff(train) ** 2))
    if denominator <= 0:
        return None
    err = np.asarray(point, dtype=np.float64) - np.asarray(test, dtype=np.float64)
    return math.sqrt(float(np.mean(err ** 2)) / denominator)


def coverage(qf: QuantileForecast, test) -> Dict[float, float]:
    """Share of test values at or below the forecast quantile, per level"""
    test = np.asarray(test, dtype=np.float64)
    return {q: float(np.mean(test <= qf.values[:, j])) for j, q in enumerate(qf.levels)}


def score_series(qf: QuantileForecast, test, train,
                 score_levels: Sequence[float] = SCORE_LEVELS) -> Dict[str, Optional[float]]:
    """All metrics of one forecast, keyed by metric name"""
    scores: Dict[str, Optional[float]] = {}
    for q in score_levels:
        scores[sq_name(q)] = scaled_quantile_loss(q, qf.at(q), test, train)
    scores[SRPS] = srps_half_plus(qf, test, train, [q for q in qf.levels if q < 1.0])
    scores[RMSSE] = rmsse(qf.point(), test, train)
    for q, value in coverage(qf, test).items():
        scores[coverage_name(q)] = value
    return scores


class Verdict(str, Enum):
    A_BETTER = "a_better"
    B_BETTER = "b_better"
    INDISTINGUISHABLE = "indistinguishable"


@dataclass
class SignificanceResult:
    """Paired test outcome for one hypothesis"""
    statistic: float
    p_value: float
    adjusted_p: float
    n_pairs: int
    verdict: Optional[Verdict]


def paired_t(losses_a, losses_b) -> Tuple[float, float]:
    """
    Two-sided paired t-test on a - b

    Differences with zero variance give t = 0, p = 1 when all are zero and
    t = +-inf, p = 0 otherwise.
    """
    a = np.asarray(losses_a, dtype=np.float64)
    b = np.asarray(losses_b, dtype=np.float64)
    diff = a - b
    if np.ptp(diff) == 0.0:
        if diff[0] == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff[0]), 0.0
    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


def benjamini_hochberg(p_values: Sequence[float], alpha: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """BH-adjusted p-values and the rejection mask at false discovery rate alpha"""
    p_values = np.asarray(p_values, dtype=np.float64)
    if p_values.size == 0:
        return p_values, np.zeros(0, dtype=bool)
    adjusted = np.atleast_1d(stats.false_discovery_control(p_values, method="bh"))
    return adjusted, adjusted <= alpha


def paired_fdr_test(losses_a: Union[Mapping[str, Sequence[float]], Sequence[float]],
                    losses_b: Union[Mapping[str, Sequence[float]], Sequence[float]],
                    alpha: float = 0.05) -> Dict[str, SignificanceResult]:
    """
    Paired t-tests over a family of hypotheses with Benjamini-Hochberg correction

    Args:
        losses_a: Per-series losses of model a, either one vector or a mapping
            hypothesis name -> vector
        losses_b: Same layout for model b
        alpha: False discovery rate

    Returns:
        Mapping hypothesis name -> SignificanceResult; a plain vector is keyed "loss".
        Hypotheses with fewer than 3 pairs get no verdict and stay out of the correction.
    """
    if not isinstance(losses_a, Mapping):
        losses_a, losses_b = {"loss": losses_a}, {"loss": losses_b}
    if set(losses_a) != set(losses_b):
        raise ParameterError("both models need losses for the same hypotheses")

    raw: Dict[str, Tuple[float, float, int, float]] = {}
    results: Dict[str, SignificanceResult] = {}
    for name in sorted(losses_a):
        a = np.asarray(losses_a[name], dtype=np.float64)
        b = np.asarray(losses_b[name], dtype=np.float64)
        if a.shape != b.shape:
            raise ParameterError(f"{name}: paired loss vectors differ in length")
        if a.shape[0] < 3:
            results[name] = SignificanceResult(math.nan, math.nan, math.nan, int(a.shape[0]), None)
            continue
        t, p = paired_t(a, b)
        raw[name] = (t, p, int(a.shape[0]), float(np.mean(a - b)))

    if raw:
        names = list(raw)
        adjusted, rejected = benjamini_hochberg([raw[n][1] for n in names], alpha)
        for name, p_adj, reject in zip(names, adjusted, rejected):
            t, p, n, mean_diff = raw[name]
            if reject and mean_diff != 0.0:
                verdict = Verdict.A_BETTER if mean_diff < 0 else Verdict.B_BETTER
            else:
                verdict = Verdict.INDISTINGUISHABLE
            results[name] = SignificanceResult(t, p, float(p_adj), n, verdict)
    return results


@dataclass
class ScoreTable:
    """Per-series scores of every model on one data set, aggregated by mean"""
    dataset: str
    records: Dict[str, Dict[str, Dict[str, Optional[float]]]] = field(default_factory=dict)
    missing: Dict[str, List[str]] = field(default_factory=dict)

    def add(self, model: str, item_id: str, scores: Mapping[str, Optional[float]]):
        self.records.setdefault(model, {})[item_id] = dict(scores)

    def add_missing(self, model: str, item_id: str):
        self.missing.setdefault(model, []).append(item_id)

    def merge(self, other: "ScoreTable"):
        for model, by_item in other.records.items():
            for item_id, scores in by_item.items():
                self.add(model, item_id, scores)
        for model, items in other.missing.items():
            for item_id in items:
                self.add_missing(model, item_id)

    @property
    def models(self) -> List[str]:
        return sorted(set(self.records) | set(self.missing))

    def metric_names(self, model: str) -> List[str]:
        names = []
        for scores in self.records.get(model, {}).values():
            names.extend(n for n in scores if n not in names)
        return names

    def losses(self, model: str, metric: str) -> Dict[str, float]:
        """Defined per-series values of one metric, keyed by item id"""
        return {item: scores[metric] for item, scores in self.records.get(model, {}).items()
                if scores.get(metric) is not None}

    def aggregate(self, model: str, metric: str) -> Tuple[float, int]:
        """Mean over defined values, and how many series were excluded"""
        by_item = self.records.get(model, {})
        values = [by_item[item][metric] for item in sorted(by_item)
                  if by_item[item].get(metric) is not None]
        excluded = len(by_item) - len(values) + len(self.missing.get(model, []))
        return (float(np.mean(values)) if values else math.nan), excluded

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for model in self.models:
            for metric in self.metric_names(model):
                value, excluded = self.aggregate(model, metric)
                rows.append({"dataset": self.dataset, "model": model, "metric": metric,
                             "value": value, "excluded_count": excluded})
        return pd.DataFrame(rows, columns=["dataset", "model", "metric", "value", "excluded_count"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Score table written to {path}")

    def series_frame(self) -> pd.DataFrame:
        """Long table of every per-series score"""
        rows = [{"model": model, "item_id": item, "metric": metric, "value": value}
                for model in sorted(self.records)
                for item in sorted(self.records[model])
                for metric, value in self.records[model][item].items()]
        return pd.DataFrame(rows, columns=["model", "item_id", "metric", "value"])

    def coverage_frame(self) -> pd.DataFrame:
        """Mean coverage per model and level"""
        rows = []
        for model in self.models:
            for metric in self.metric_names(model):
                if metric.startswith("coverage"):
                    value, _ = self.aggregate(model, metric)
                    rows.append({"model": model, "level": float(metric[len("coverage"):]),
                                 "coverage": value})
        return pd.DataFrame(rows, columns=["model", "level", "coverage"])

    def compare(self, pairs: Sequence[Tuple[str, str]], metrics: Sequence[str],
                alpha: float = 0.05) -> pd.DataFrame:
        """
        Paired tests over series scored by both models, corrected across the
        whole metric x model-pair family
        """
        family_a: Dict[str, List[float]] = {}
        family_b: Dict[str, List[float]] = {}
        for model_a, model_b in pairs:
            for metric in metrics:
                a = self.losses(model_a, metric)
                b = self.losses(model_b, metric)
                common = sorted(set(a) & set(b))
                key = f"{model_a}|{model_b}|{metric}"
                family_a[key] = [a[i] for i in common]
                family_b[key] = [b[i] for i in common]
        results = paired_fdr_test(family_a, family_b, alpha)
        rows = []
        for key, res in results.items():
            model_a, model_b, metric = key.split("|")
            rows.append({"model_a": model_a, "model_b": model_b, "metric": metric,
                         "t": res.statistic, "p_value": res.p_value, "adjusted_p": res.adjusted_p,
                         "n": res.n_pairs, "verdict": res.verdict.value if res.verdict else ""})
        return pd.DataFrame(rows, columns=["model_a", "model_b", "metric", "t", "p_value",
                                           "adjusted_p", "n", "verdict"])
