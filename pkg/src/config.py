"""
Configuration module for the intermittent-demand benchmark
"""

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional
import json
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

from src.exceptions import ConfigError

logger = logging.getLogger(__name__)

QUANTILE_LEVELS = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99]
SCORE_LEVELS = [0.5, 0.8, 0.9, 0.95, 0.99]


@dataclass
class TrainConfig:
    """SVGP optimization settings"""
    max_iters: int = 100
    learning_rate: float = 0.1
    mc_samples: int = 16  # draws per ELBO evaluation
    patience: int = 10
    min_rel_improvement: float = 1e-4
    max_restarts: int = 3
    max_inducing: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "rng_seed":
                continue
            if f.name == "max_restarts" and value == 0:
                continue
            if value is None or value <= 0:
                raise ConfigError(f"TrainConfig.{f.name} must be positive, got {value}")


@dataclass
class ForecastConfig:
    """Forecast sampling and quantile levels"""
    n_samples: int = 50_000
    levels: List[float] = None
    score_levels: List[float] = None

    def __post_init__(self):
        if self.levels is None:
            self.levels = list(QUANTILE_LEVELS)
        if self.score_levels is None:
            self.score_levels = list(SCORE_LEVELS)
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")


@dataclass
class DatasetConfig:
    """Train length, horizon and selection rules of one data set"""
    name: str
    train_length: int
    horizon: int
    adi_threshold: float = 1.0  # keep series with ADI strictly above this
    subset: Optional[int] = None  # first N item ids, lexicographically

    def __post_init__(self):
        if self.train_length < 2 or self.horizon < 1:
            raise ConfigError(
                f"dataset {self.name}: need train_length >= 2 and horizon >= 1, "
                f"got {self.train_length}, {self.horizon}")


DEFAULT_DATASETS: Dict[str, DatasetConfig] = {
    "M5": DatasetConfig("M5", 1941, 28, subset=500),
    "OnlineRetail": DatasetConfig("OnlineRetail", 346, 28),
    "Auto": DatasetConfig("Auto", 18, 6),
    "Carparts": DatasetConfig("Carparts", 45, 6),
    "RAF": DatasetConfig("RAF", 72, 12),
}


@dataclass
class BenchConfig:
    """Experiment runner settings"""
    seed: int = 42
    parallelism: int = 1
    models: List[str] = None
    output_dir: str = "results"
    max_failure_fraction: float = 0.05
    log_file: str = "intermittent_gp.log"

    def __post_init__(self):
        if self.models is None:
            self.models = ["EmpQuant", "WSS", "ADIDA_C", "NegBinGP", "TweedieGP"]
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be at least 1, got {self.parallelism}")


class ConfigManager:
    """Manages application configuration"""

    ENV_OVERRIDES = {
        "IGP_SEED": ("bench", "seed", int),
        "IGP_PARALLELISM": ("bench", "parallelism", int),
        "IGP_OUTPUT_DIR": ("bench", "output_dir", str),
    }

    def __init__(self, config_file: str = "config.json"):
        load_dotenv()
        self.config_file = os.environ.get("IGP_CONFIG", config_file)
        self.training = TrainConfig()
        self.forecast = ForecastConfig()
        self.bench = BenchConfig()
        self.datasets: Dict[str, DatasetConfig] = {
            name: DatasetConfig(**asdict(ds)) for name, ds in DEFAULT_DATASETS.items()}
        self.load()
        self._apply_env()

    def load(self):
        """Load configuration from file"""
        if not Path(self.config_file).exists():
            logger.info(f"No config file at {self.config_file}, using defaults")
            return
        try:
            with open(self.config_file, 'r') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {self.config_file}: {e}") from e
        self._update_from_dict(data)
        logger.debug(f"Configuration loaded from {self.config_file}")

    def save(self):
        """Save configuration to file"""
        data = {
            'training': asdict(self.training),
            'forecast': asdict(self.forecast),
            'bench': asdict(self.bench),
            'datasets': {name: asdict(ds) for name, ds in self.datasets.items()},
        }
        with open(self.config_file, 'w') as f:
            json.dump(data, f, indent=4)
        logger.info(f"Configuration saved to {self.config_file}")

    def dataset(self, name: str) -> DatasetConfig:
        """Look up a data set by name"""
        if name not in self.datasets:
            raise ConfigError(f"unknown dataset '{name}', known: {sorted(self.datasets)}")
        return self.datasets[name]

    def _update_from_dict(self, data: dict):
        """Update configuration from dictionary"""
        for section in ('training', 'forecast', 'bench'):
            if section not in data:
                continue
            current = getattr(self, section)
            values = asdict(current)
            for key, value in data[section].items():
                if key in values:
                    values[key] = value
                else:
                    logger.warning(f"Ignoring unknown config key {section}.{key}")
            try:
                setattr(self, section, type(current)(**values))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad {section} settings: {e}") from e

        for name, entry in data.get('datasets', {}).items():
            values = asdict(self.datasets[name]) if name in self.datasets else {"name": name}
            values.update(entry)
            try:
                self.datasets[name] = DatasetConfig(**values)
            except TypeError as e:
                raise ConfigError(f"bad dataset entry '{name}': {e}") from e

    def _apply_env(self):
        for var, (section, key, cast) in self.ENV_OVERRIDES.items():
            if var in os.environ:
                try:
                    setattr(getattr(self, section), key, cast(os.environ[var]))
                except ValueError as e:
                    raise ConfigError(f"bad value for {var}: {e}") from e
                logger.info(f"Configuration override from environment: {section}.{key}")
