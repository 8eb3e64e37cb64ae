"""
Data set ingestion, train/test split and median-demand scaling
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import DatasetConfig
from src.exceptions import DataError
from src.svgp import ForecastSamples
from src.utils import average_demand_interval

logger = logging.getLogger(__name__)

COLUMNS = ["item_id", "t", "value"]


@dataclass(frozen=True)
class SeriesRecord:
    """One series: the last T + h observations"""
    item_id: str
    values: np.ndarray
    t_train: int
    horizon: int

    def __post_init__(self):
        if self.values.shape[0] != self.t_train + self.horizon:
            raise DataError(f"{self.item_id}: expected {self.t_train + self.horizon} values, "
                            f"got {self.values.shape[0]}")
        if (self.values < 0).any():
            raise DataError(f"{self.item_id}: values must be nonnegative")

    @property
    def train(self) -> np.ndarray:
        return self.values[:self.t_train]

    @property
    def test(self) -> np.ndarray:
        return self.values[self.t_train:]

    @property
    def train_times(self) -> np.ndarray:
        return np.arange(1, self.t_train + 1, dtype=np.float64)

    @property
    def test_times(self) -> np.ndarray:
        return np.arange(self.t_train + 1, self.t_train + self.horizon + 1, dtype=np.float64)


@dataclass(frozen=True)
class ScaleInfo:
    """Median of the positive training values, 1 if there are none"""
    factor: float = 1.0


def scale_series(train) -> Tuple[np.ndarray, ScaleInfo]:
    """
    Divide a training series by the median of its positive values

    Args:
        train: Training values

    Returns:
        (scaled values, ScaleInfo); zeros stay zero
    """
    train = np.asarray(train, dtype=np.float64)
    positive = train[train > 0]
    factor = float(np.median(positive)) if positive.size else 1.0
    return train / factor, ScaleInfo(factor)


def unscale_samples(samples: ForecastSamples, info: ScaleInfo) -> ForecastSamples:
    """Multiply draws back by the scale factor; apply before any rounding"""
    return samples.rescaled(info.factor)


def _parse_frame(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if list(frame.columns) != COLUMNS:
        raise DataError(f"header must be {','.join(COLUMNS)}, got {','.join(frame.columns)}", line=1)
    if frame.empty:
        raise DataError(f"{path} holds no rows")

    # header is line 1
    lines = frame.index.to_numpy() + 2
    t = pd.to_numeric(frame["t"], errors="coerce")
    value = pd.to_numeric(frame["value"], errors="coerce")
    bad = (frame["item_id"].str.strip() == "") | t.isna() | value.isna()
    bad |= (t < 1) | (t != np.floor(t)) | (value < 0) | (value != np.floor(value))
    if bad.any():
        first = int(np.argmax(bad.to_numpy()))
        row = frame.iloc[first]
        raise DataError(f"malformed row {row['item_id']!r},{row['t']!r},{row['value']!r}",
                        line=int(lines[first]))
    parsed = pd.DataFrame({"item_id": frame["item_id"], "t": t.astype(np.int64),
                           "value": value.astype(np.float64), "line": lines})
    duplicated = parsed.duplicated(["item_id", "t"])
    if duplicated.any():
        first = int(np.argmax(duplicated.to_numpy()))
        raise DataError(f"duplicate period for item {parsed['item_id'].iloc[first]!r}",
                        line=int(parsed["line"].iloc[first]))
    return parsed


def _series(frame: pd.DataFrame):
    """Yield (item_id, values) per item in id order, rejecting gaps in t"""
    for item_id, group in frame.sort_values(["item_id", "t"]).groupby("item_id", sort=True):
        t = group["t"].to_numpy()
        if not np.array_equal(t, np.arange(t[0], t[0] + t.shape[0])):
            gap = int(np.argmax(np.diff(t) != 1)) + 1
            raise DataError(f"item {item_id!r} skips periods between t={t[gap - 1]} and t={t[gap]}",
                            line=int(group["line"].iloc[gap]))
        yield str(item_id), group["value"].to_numpy()


def load_dataset(path, config: DatasetConfig, adi_threshold: Optional[float] = None) -> List[SeriesRecord]:
    """
    Load a long-format CSV (item_id, t, value) into split series

    Args:
        path: CSV path
        config: Data set configuration (train length, horizon, subset)
        adi_threshold: Keep series whose ADI over the T + h window exceeds this;
            defaults to the configured threshold (1.0, i.e. at least one zero)

    Returns:
        SeriesRecords sorted by item id

    Raises:
        DataError: on malformed rows (with line number), gaps in t, or an empty result
    """
    path = Path(path)
    threshold = config.adi_threshold if adi_threshold is None else adi_threshold
    window = config.train_length + config.horizon

    records: List[SeriesRecord] = []
    too_short = 0
    not_intermittent = 0
    for item_id, values in _series(_parse_frame(path)):
        if values.shape[0] < window:
            too_short += 1
            continue
        values = values[-window:]
        if not average_demand_interval(values) > threshold:
            not_intermittent += 1
            continue
        records.append(SeriesRecord(item_id, values, config.train_length, config.horizon))

    if too_short:
        logger.warning(f"{config.name}: skipped {too_short} series shorter than {window} periods")
    logger.info(f"{config.name}: {not_intermittent} series dropped by ADI > {threshold} filter")
    if config.subset is not None:
        records = records[:config.subset]
    if not records:
        raise DataError(f"{config.name}: no series left after filtering {path}")
    logger.info(f"{config.name}: loaded {len(records)} series (T={config.train_length}, h={config.horizon})")
    return records


def load_series(path, horizon: int, adi_threshold: float = 1.0) -> List[SeriesRecord]:
    """
    Load every series in full and hold out its last horizon values

    Used when no data set configuration is given: each series gets
    T = its length - horizon.

    Raises:
        DataError: on malformed rows, gaps in t, or an empty result
    """
    path = Path(path)
    if horizon < 1:
        raise DataError(f"horizon must be at least 1, got {horizon}")
    records = [SeriesRecord(item_id, values, values.shape[0] - horizon, horizon)
               for item_id, values in _series(_parse_frame(path))
               if values.shape[0] >= horizon + 2 and average_demand_interval(values) > adi_threshold]
    if not records:
        raise DataError(f"no series in {path} with more than {horizon + 1} periods passed the ADI filter")
    logger.info(f"{path.name}: loaded {len(records)} series with h={horizon}")
    return records
