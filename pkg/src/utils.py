"""
Utility functions for the intermittent-demand benchmark
"""

import hashlib
import math
import logging
from pathlib import Path
from typing import Dict, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def average_demand_interval(values: Sequence[float]) -> float:
    """
    Average number of periods per positive demand

    Args:
        values: Demand series

    Returns:
        len(values) / number of positive values; inf when there is no positive demand
    """
    values = np.asarray(values, dtype=np.float64)
    n_pos = int((values > 0).sum())
    if n_pos == 0:
        return math.inf
    return values.shape[0] / n_pos


def type1_quantiles(values: Sequence[float], levels: Sequence[float], axis: int = 0) -> np.ndarray:
    """Inverse-CDF (type-1) empirical quantiles along axis, levels first"""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] == 0:
        raise ValueError("cannot take quantiles of an empty sample")
    return np.quantile(values, np.asarray(levels, dtype=np.float64), axis=axis,
                       method="inverted_cdf")


def series_seed(master_seed: int, item_id: str) -> int:
    """Stable 63-bit seed from the master seed and a series id"""
    digest = hashlib.blake2b(f"{master_seed}:{item_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def timing_summary(durations: Iterable[float]) -> Dict[str, float]:
    """Mean and standard deviation of wall-clock durations in seconds"""
    durations = np.asarray(list(durations), dtype=np.float64)
    if durations.size == 0:
        return {"mean": math.nan, "std": math.nan, "count": 0}
    return {"mean": float(durations.mean()), "std": float(durations.std()),
            "count": int(durations.size)}


def create_directories(*directories: str):
    """Create necessary directories"""
    for directory in directories:
        Path(directory).mkdir(parents=True, exist_ok=True)
        logger.info(f"Ensured directory exists: {directory}")


def validate_csv_file(filepath: str) -> bool:
    """
    Validate that a path points to a readable CSV file

    Args:
        filepath: Path to the file

    Returns:
        True if the file exists and has a .csv suffix
    """
    path = Path(filepath)
    if not path.is_file():
        logger.error(f"Data file not found: {filepath}")
        return False
    if path.suffix.lower() != ".csv":
        logger.error(f"Data file is not a CSV: {filepath}")
        return False
    return True
