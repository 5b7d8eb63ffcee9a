"""Input validation helpers shared by the estimators in this package."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


class ConfigurationError(ValueError):
    """Raised when a hyperparameter or config value is out of its valid range."""


class DataError(ValueError):
    """Raised when runtime data violates a contract (shape, index range, alignment)."""


class TrainingFault(RuntimeError):
    """Raised when training produces non-finite losses or gradients."""


def check_fitted(estimator, attributes):
    """Raise NotFittedError unless all fitted `attributes` are present and not None."""
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet (missing {missing}); "
            "call fit() before using this method."
        )


def check_array_1d(x, name="x", dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise DataError(f"{name} must be 1-D, got shape {x.shape}")
    return x


def check_array_2d(x, name="x", dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def check_in_range(value, lo, hi, name, *, lo_open=False, hi_open=False):
    ok_lo = value > lo if lo_open else value >= lo
    ok_hi = value < hi if hi_open else value <= hi
    if not (ok_lo and ok_hi):
        raise ConfigurationError(f"{name}={value!r} outside valid range "
                                 f"{'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}")
    return value


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def as_generator(rng) -> np.random.Generator:
    """Accept a seed or a Generator and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
