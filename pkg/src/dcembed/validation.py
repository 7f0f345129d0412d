"""Input validation helpers for array-shaped arguments.

All training and evaluation code works on float64 feature matrices and
integer label vectors; these helpers coerce and check once at the API
boundary so the numeric code can assume clean inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_feature_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise DataError(f"{name} must be a 2-D matrix, got ndim={X.ndim}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise DataError(f"{name} must have at least one row and one column, got shape {X.shape}")
    bad = ~np.isfinite(X)
    if bad.any():
        row = int(np.nonzero(bad.any(axis=1))[0][0])
        raise DataError(f"{name} contains a non-finite value at row {row}")
    return X


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Coerce to a 1-D int64 array of non-negative class ids of length n_samples."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise DataError(f"{name} must be 1-D, got ndim={y.ndim}")
    if y.shape[0] != n_samples:
        raise DataError(f"{name} has {y.shape[0]} entries but there are {n_samples} samples")
    if not np.issubdtype(y.dtype, np.integer):
        as_int = y.astype(np.int64, copy=True)
        if not np.array_equal(as_int, y):
            raise DataError(f"{name} must contain integer class ids")
        y = as_int
    else:
        y = y.astype(np.int64)
    if y.size and y.min() < 0:
        row = int(np.nonzero(y < 0)[0][0])
        raise DataError(f"{name} contains a negative class id at row {row}")
    return y


def check_min_classes(y: np.ndarray, minimum: int, context: str) -> None:
    n = np.unique(y).size
    if n < minimum:
        raise DataError(f"{context} requires at least {minimum} distinct classes, got {n}")


def as_generator(seed) -> np.random.Generator:
    """Accept an int seed, a seed sequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
