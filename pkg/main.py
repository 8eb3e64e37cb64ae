"""Main entry point for the intermittent-demand GP benchmark."""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from src.config import ConfigManager
from src.data import load_dataset, load_series
from src.exceptions import (ConfigError, DataError, NumericRangeError,
                            ParameterError)
from src.forecasters import ABLATION_MODELS, MODEL_NAMES
from src.orchestrator import ExperimentOrchestrator, forecast_horizon
from src.tweedie import TweedieParams, log_density, prob_zero, truncate_series
from src.utils import validate_csv_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


def setup_logging(level: str, log_file: str):
    """Configure logging"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Probabilistic forecasts for intermittent demand with sparse variational GPs")
    parser.add_argument("--config", default="config.json", help="configuration file")
    parser.add_argument("--log-level", default=os.environ.get("IGP_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="fit, forecast and score models on one data set")
    run.add_argument("--dataset", required=True, help="data set name, e.g. Carparts")
    run.add_argument("--data", required=True, help="long-format CSV with item_id,t,value")
    run.add_argument("--models", default=None,
                     help=f"comma-separated subset of {','.join(MODEL_NAMES)}")
    run.add_argument("--seed", type=int, default=None, help="master seed")
    run.add_argument("--parallelism", type=int, default=None, help="worker processes")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--adi-filter", type=float, default=None,
                     help="keep series with ADI above this value (default 1, i.e. any zero)")
    run.add_argument("--ablation", action="store_true",
                     help="add the likelihood ablation models")

    evaluate = sub.add_parser("evaluate", help="score existing forecast CSVs")
    evaluate.add_argument("--dataset", default=None,
                          help="data set name; without it h comes from the forecasts and T = length - h")
    evaluate.add_argument("--forecasts", required=True, help="directory with one CSV per model")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--adi-filter", type=float, default=None)

    density = sub.add_parser("density", help="evaluate the Tweedie log-density at one point")
    density.add_argument("--mu", type=float, required=True)
    density.add_argument("--phi", type=float, required=True)
    density.add_argument("--rho", type=float, required=True)
    density.add_argument("--y", type=float, required=True)
    return parser


def _model_list(args, config: ConfigManager) -> List[str]:
    models = args.models.split(",") if args.models else list(config.bench.models)
    models = [m.strip() for m in models if m.strip()]
    if args.ablation:
        models += [m for m in ABLATION_MODELS if m not in models]
    unknown = [m for m in models if m not in MODEL_NAMES]
    if unknown:
        raise ConfigError(f"unknown model(s) {unknown}, choose from {', '.join(MODEL_NAMES)}")
    return models


def _load_records(args, config: ConfigManager):
    if not validate_csv_file(args.data):
        raise DataError(f"cannot use data file {args.data}")
    return config.dataset(args.dataset), load_dataset(args.data, config.dataset(args.dataset),
                                                       args.adi_filter)


def run_benchmark(args, config: ConfigManager) -> int:
    """Run one data set end to end"""
    if args.seed is not None:
        config.bench.seed = args.seed
    if args.parallelism is not None:
        config.bench.parallelism = args.parallelism
    models = _model_list(args, config)
    dataset, records = _load_records(args, config)
    out_dir = args.out or os.path.join(config.bench.output_dir, dataset.name)

    orchestrator = ExperimentOrchestrator(config.training, config.forecast, config.bench)
    result = orchestrator.run(dataset, records, models, out_dir)

    frame = result.table.to_frame()
    headline = frame[frame["metric"].isin(["sQ0.5", "sQ0.9", "sRPS0.5+", "RMSSE"])]
    logger.info("Aggregate scores:\n" + headline.pivot(index="metric", columns="model",
                                                        values="value").round(3).to_string())
    logger.info("Timing (s):\n" + result.timings.round(3).to_string(index=False))

    worst = result.worst_failure_fraction()
    if worst > config.bench.max_failure_fraction:
        logger.error(f"Training failures reached {worst:.1%}, above the allowed "
                     f"{config.bench.max_failure_fraction:.1%}")
        return EXIT_TRAINING
    return EXIT_OK


def run_evaluation(args, config: ConfigManager) -> int:
    """Score forecasts written by an earlier run"""
    if args.dataset:
        dataset, records = _load_records(args, config)
        name = dataset.name
    else:
        if not validate_csv_file(args.data):
            raise DataError(f"cannot use data file {args.data}")
        horizon = forecast_horizon(args.forecasts, config.forecast.levels)
        threshold = 1.0 if args.adi_filter is None else args.adi_filter
        records = load_series(args.data, horizon, threshold)
        name = Path(args.data).stem
        logger.info(f"No dataset given: h={horizon} from the forecasts, T = series length - {horizon}")
    orchestrator = ExperimentOrchestrator(config.training, config.forecast, config.bench)
    result = orchestrator.evaluate(name, records, args.forecasts, args.out)
    logger.info("Aggregate scores:\n" + result.table.to_frame().to_string(index=False))
    return EXIT_OK


def run_density(args) -> int:
    """Print the Tweedie log-density, P(Y=0) and the series truncation range"""
    params = TweedieParams(args.mu, args.phi, args.rho)
    print(f"log_density={log_density(args.y, params):.10g}")
    print(f"prob_zero={prob_zero(params):.10g}")
    if args.y > 0:
        ws = truncate_series(args.y, params)
        print(f"j_max={ws.j_max} j_lo={ws.j_lo} j_hi={ws.j_hi} terms={ws.n_terms}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    try:
        config = ConfigManager(args.config)
    except ConfigError as e:
        setup_logging(args.log_level, "intermittent_gp.log")
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    setup_logging(args.log_level, config.bench.log_file)

    try:
        if args.command == "run":
            return run_benchmark(args, config)
        if args.command == "evaluate":
            return run_evaluation(args, config)
        return run_density(args)
    except (ConfigError, ParameterError, NumericRangeError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
