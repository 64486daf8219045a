"""Input validation helpers shared by the estimator and the training loop."""

from __future__ import annotations

import math
import numbers

import numpy as np


class UFNRecError(Exception):
    pass


class DataError(UFNRecError, ValueError):
    pass


class ConfigError(UFNRecError, ValueError):
    pass


class TrainingError(UFNRecError, RuntimeError):
    pass


def check_positive_int(value, name: str, allow_zero: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return int(value)


def check_interval(value, name: str, low: float, high: float, closed_high=True) -> float:
    if not isinstance(value, numbers.Real) or math.isnan(value):
        raise ConfigError(f"{name} must be a real number, got {value!r}")
    ok = low <= value <= high if closed_high else low <= value < high
    if not ok:
        raise ConfigError(f"{name}={value} outside [{low}, {high}{']' if closed_high else ')'}")
    return float(value)


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ConfigError(f"{name}={value!r}; expected one of {sorted(choices)}")
    return value


def check_threshold(m) -> float:
    """Mining threshold: positive integer, or ``None``/inf meaning never."""
    if m is None:
        return math.inf
    if isinstance(m, float) and math.isinf(m) and m > 0:
        return m
    return check_positive_int(m, "m")


def check_sequences(sequences, item_count: int, allow_empty: bool = False) -> list[list[int]]:
    """Validate a list of item-index sequences against the vocabulary."""
    out = []
    for u, seq in enumerate(sequences):
        seq = [int(i) for i in seq]
        if not seq and not allow_empty:
            raise DataError(f"sequence {u} is empty")
        if seq and (min(seq) < 1 or max(seq) > item_count):
            raise DataError(f"sequence {u}: item index outside [1, {item_count}]")
        out.append(seq)
    return out


def check_finite(array, what: str) -> None:
    if not np.all(np.isfinite(np.asarray(array))):
        raise TrainingError(f"non-finite values in {what}")
