"""
Experiment Orchestrator - Coordinates data, models and scoring
"""

import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from src.config import BenchConfig, DatasetConfig, ForecastConfig, TrainConfig
from src.data import SeriesRecord
from src.exceptions import DataError, TrainingFailedError
from src.forecasters import Forecaster, build_forecasters
from src.metrics import (RMSSE, SRPS, QuantileForecast, ScoreTable, score_series,
                         sq_name)
from src.utils import create_directories, series_seed, timing_summary

logger = logging.getLogger(__name__)

_FORECASTERS: Optional[Dict[str, Forecaster]] = None
_SCORE_LEVELS: Sequence[float] = ()


@dataclass
class SeriesOutcome:
    """One model on one series"""
    item_id: str
    model: str
    seconds: float
    forecast: Optional[QuantileForecast] = None
    scores: Optional[Dict[str, Optional[float]]] = None
    error: Optional[str] = None


@dataclass
class ExperimentResult:
    """Everything a run produced"""
    dataset: str
    n_series: int
    table: ScoreTable
    timings: pd.DataFrame
    failures: Dict[str, int] = field(default_factory=dict)
    coverage_violations: List[str] = field(default_factory=list)

    def failure_fraction(self, model: str) -> float:
        return self.failures.get(model, 0) / self.n_series if self.n_series else 0.0

    def worst_failure_fraction(self) -> float:
        return max((self.failure_fraction(m) for m in self.failures), default=0.0)


def _init_worker(state_pack: dict):
    """Bind the forecasters of one run to this process"""
    global _FORECASTERS, _SCORE_LEVELS
    logging.basicConfig(level=state_pack["log_level"],
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    torch.set_num_threads(1)
    _FORECASTERS = build_forecasters(state_pack["models"], state_pack["train_cfg"],
                                     state_pack["forecast_cfg"])
    _SCORE_LEVELS = state_pack["forecast_cfg"].score_levels


def _process_series(record: SeriesRecord, master_seed: int) -> List[SeriesOutcome]:
    """Fit, forecast and score every model on one series"""
    seed = series_seed(master_seed, record.item_id)
    outcomes = []
    for name, forecaster in _FORECASTERS.items():
        start = time.perf_counter()
        try:
            qf = forecaster.predict(record, seed)
        except TrainingFailedError as e:
            logger.error(f"{name} failed on {record.item_id}: {e}")
            outcomes.append(SeriesOutcome(record.item_id, name, time.perf_counter() - start, error=str(e)))
            continue
        seconds = time.perf_counter() - start
        scores = score_series(qf, record.test, record.train, _SCORE_LEVELS)
        outcomes.append(SeriesOutcome(record.item_id, name, seconds, qf, scores))
    return outcomes


def _level_column(level: float) -> str:
    return f"q{level:g}"


def forecast_frame(forecasts: Dict[str, QuantileForecast]) -> pd.DataFrame:
    """Long table with h rows per series: item_id, step, q0.5..q0.99, mean"""
    frames = []
    for item_id in sorted(forecasts):
        qf = forecasts[item_id]
        frame = pd.DataFrame(qf.values, columns=[_level_column(q) for q in qf.levels])
        frame.insert(0, "step", np.arange(1, qf.horizon + 1))
        frame.insert(0, "item_id", item_id)
        frame["mean"] = qf.point()
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def read_forecasts(path, levels: Sequence[float]) -> Dict[str, QuantileForecast]:
    """Parse a forecast CSV written by forecast_frame"""
    frame = pd.read_csv(path, dtype={"item_id": str})
    columns = [_level_column(q) for q in levels]
    missing = [c for c in ["item_id", "step", *columns] if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}", line=1)
    forecasts = {}
    for item_id, group in frame.sort_values(["item_id", "step"]).groupby("item_id", sort=True):
        mean = group["mean"].to_numpy() if "mean" in group else None
        forecasts[str(item_id)] = QuantileForecast(tuple(levels), group[columns].to_numpy(), mean)
    return forecasts


def forecast_horizon(forecast_dir, levels: Sequence[float]) -> int:
    """Step count shared by every series in the forecast CSVs of a directory"""
    horizons = set()
    for path in sorted(Path(forecast_dir).glob("*.csv")):
        horizons.update(qf.horizon for qf in read_forecasts(path, levels).values())
    if not horizons:
        raise DataError(f"no forecasts in {forecast_dir}")
    if len(horizons) > 1:
        raise DataError(f"forecasts in {forecast_dir} mix horizons {sorted(horizons)}")
    return horizons.pop()


def check_coverage_bound(records: Sequence[SeriesRecord],
                         forecasts: Dict[str, Dict[str, QuantileForecast]]) -> List[str]:
    """
    Check that coverage at every level is at least the zero share of the test data

    Args:
        records: Scored series
        forecasts: model -> item_id -> forecast

    Returns:
        Human-readable violations; empty when the bound holds everywhere
    """
    by_id = {r.item_id: r for r in records}
    violations = []
    for model in sorted(forecasts):
        items = sorted(forecasts[model])
        if not items:
            continue
        test = np.concatenate([by_id[i].test for i in items])
        zero_share = float(np.mean(test == 0))
        levels = forecasts[model][items[0]].levels
        for j, q in enumerate(levels):
            values = np.concatenate([forecasts[model][i].values[:, j] for i in items])
            covered = float(np.mean(test <= values))
            if covered < zero_share:
                violations.append(f"{model} coverage {covered:.4f} at level {q:g} "
                                  f"below zero share {zero_share:.4f}")
    return violations


class ExperimentOrchestrator:
    """Runs every selected model over every series of one data set"""

    def __init__(self, train_cfg: Optional[TrainConfig] = None,
                 forecast_cfg: Optional[ForecastConfig] = None,
                 bench_cfg: Optional[BenchConfig] = None):
        """
        Initialize the orchestrator

        Args:
            train_cfg: GP training settings
            forecast_cfg: Sampling and quantile levels
            bench_cfg: Seed, parallelism and output settings
        """
        self.train_cfg = train_cfg or TrainConfig()
        self.forecast_cfg = forecast_cfg or ForecastConfig()
        self.bench_cfg = bench_cfg or BenchConfig()

    def _state_pack(self, models: Sequence[str]) -> dict:
        return {"models": list(models), "train_cfg": self.train_cfg,
                "forecast_cfg": self.forecast_cfg,
                "log_level": logging.getLogger().getEffectiveLevel()}

    def _collect(self, records: Sequence[SeriesRecord], models: Sequence[str],
                 parallelism: int) -> List[SeriesOutcome]:
        total = len(records)
        seed = self.bench_cfg.seed
        outcomes: List[SeriesOutcome] = []
        if parallelism <= 1:
            _init_worker(self._state_pack(models))
            for idx, record in enumerate(records, 1):
                outcomes.extend(_process_series(record, seed))
                logger.info(f"[{idx}/{total}] {record.item_id}: done")
            return outcomes

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx,
                                 initializer=_init_worker,
                                 initargs=(self._state_pack(models),)) as exe:
            futures = {exe.submit(_process_series, record, seed): record.item_id for record in records}
            for idx, fut in enumerate(as_completed(futures), 1):
                outcomes.extend(fut.result())
                logger.info(f"[{idx}/{total}] {futures[fut]}: done")
        return outcomes

    def run(self, dataset: DatasetConfig, records: Sequence[SeriesRecord],
            models: Sequence[str], out_dir=None, parallelism: Optional[int] = None) -> ExperimentResult:
        """
        Fit, forecast and score the models on every series

        Args:
            dataset: Data set configuration
            records: Loaded series
            models: Registry names of the models to run
            out_dir: Directory for CSV artifacts; nothing is written when None
            parallelism: Worker processes; defaults to the bench setting

        Returns:
            ExperimentResult with the score table, timings and failure counts
        """
        parallelism = parallelism or self.bench_cfg.parallelism
        logger.info(f"Running {', '.join(models)} on {len(records)} {dataset.name} series "
                    f"with {parallelism} worker(s)")
        build_forecasters(list(models), self.train_cfg, self.forecast_cfg)  # unknown names fail early
        outcomes = self._collect(records, models, parallelism)

        table = ScoreTable(dataset.name)
        forecasts: Dict[str, Dict[str, QuantileForecast]] = {m: {} for m in models}
        durations: Dict[str, List[float]] = {m: [] for m in models}
        failures = {m: 0 for m in models}
        for outcome in sorted(outcomes, key=lambda o: (o.model, o.item_id)):
            durations[outcome.model].append(outcome.seconds)
            if outcome.error is not None:
                failures[outcome.model] += 1
                table.add_missing(outcome.model, outcome.item_id)
                continue
            table.add(outcome.model, outcome.item_id, outcome.scores)
            forecasts[outcome.model][outcome.item_id] = outcome.forecast

        timings = pd.DataFrame([{"model": m, **timing_summary(durations[m])} for m in models],
                               columns=["model", "mean", "std", "count"])
        violations = check_coverage_bound(records, forecasts)
        for violation in violations:
            logger.error(f"Coverage bound violated: {violation}")
        for model, count in failures.items():
            if count:
                logger.warning(f"{model}: {count}/{len(records)} series failed to train")

        result = ExperimentResult(dataset.name, len(records), table, timings, failures, violations)
        if out_dir is not None:
            self.write_artifacts(result, forecasts, out_dir)
        return result

    def evaluate(self, dataset_name: str, records: Sequence[SeriesRecord],
                 forecast_dir, out_dir=None) -> ExperimentResult:
        """Score previously written forecast CSVs, one file per model"""
        by_id = {r.item_id: r for r in records}
        table = ScoreTable(dataset_name)
        forecasts: Dict[str, Dict[str, QuantileForecast]] = {}
        for path in sorted(Path(forecast_dir).glob("*.csv")):
            model = path.stem
            parsed = read_forecasts(path, self.forecast_cfg.levels)
            forecasts[model] = {}
            for item_id, qf in parsed.items():
                record = by_id.get(item_id)
                if record is None:
                    logger.warning(f"{model}: no data for series {item_id}, skipping")
                    continue
                if qf.horizon != record.horizon:
                    raise DataError(f"{path}: {item_id} has {qf.horizon} steps, expected {record.horizon}")
                table.add(model, item_id, score_series(qf, record.test, record.train,
                                                       self.forecast_cfg.score_levels))
                forecasts[model][item_id] = qf
            for item_id in sorted(set(by_id) - set(parsed)):
                table.add_missing(model, item_id)
        if not forecasts:
            raise DataError(f"no forecast CSVs in {forecast_dir}")
        violations = check_coverage_bound(records, forecasts)
        result = ExperimentResult(dataset_name, len(records), table,
                                  pd.DataFrame(columns=["model", "mean", "std", "count"]),
                                  {}, violations)
        if out_dir is not None:
            self.write_artifacts(result, {}, out_dir)
        return result

    def significance(self, table: ScoreTable, alpha: float = 0.05) -> pd.DataFrame:
        """Paired tests for every model pair over the scaled losses and RMSSE"""
        models = table.models
        pairs = [(a, b) for i, a in enumerate(models) for b in models[i + 1:]]
        metrics = [sq_name(q) for q in self.forecast_cfg.score_levels] + [SRPS, RMSSE]
        return table.compare(pairs, metrics, alpha)

    def write_artifacts(self, result: ExperimentResult,
                        forecasts: Dict[str, Dict[str, QuantileForecast]], out_dir):
        """Write forecasts, per-series scores, score table, timing, coverage and tests"""
        out = Path(out_dir)
        create_directories(str(out), str(out / "forecasts"))
        for model, by_item in forecasts.items():
            if by_item:
                forecast_frame(by_item).to_csv(out / "forecasts" / f"{model}.csv", index=False)
        result.table.series_frame().to_csv(out / "series_scores.csv", index=False)
        result.table.to_csv(out / "scores.csv")
        result.table.coverage_frame().to_csv(out / "coverage.csv", index=False)
        if not result.timings.empty:
            result.timings.to_csv(out / "timing.csv", index=False)
        self.significance(result.table).to_csv(out / "significance.csv", index=False)
        logger.info(f"Artifacts written to {out}")


def run_experiment(dataset: DatasetConfig, records: Sequence[SeriesRecord], models: Sequence[str],
                   train_cfg: Optional[TrainConfig] = None, parallelism: int = 1, out_dir=None,
                   forecast_cfg: Optional[ForecastConfig] = None, seed: int = 42) -> ExperimentResult:
    """Run one experiment with a fresh orchestrator"""
    bench_cfg = BenchConfig(seed=seed, parallelism=parallelism)
    orchestrator = ExperimentOrchestrator(train_cfg, forecast_cfg, bench_cfg)
    return orchestrator.run(dataset, records, models, out_dir, parallelism)
