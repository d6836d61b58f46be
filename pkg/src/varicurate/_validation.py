"""Input validation helpers used across the library and the estimators."""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    ParameterError,
    PreconditionError,
    ShapeError,
)

UNIT_NORM_ATOL = 1e-6


def as_matrix(x, name: str, dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-D array of finite floats."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} contains non-finite values")
    return arr


def as_vector(x, name: str) -> np.ndarray:
    """Coerce to a 1-D float64 vector, rejecting zero and non-finite input."""
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(v)):
        raise PreconditionError(f"{name} contains non-finite values")
    if not np.any(v != 0.0):
        raise DegenerateEmbeddingError(f"{name} is the zero vector")
    return v


def check_same_dim(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(
            f"{name_a} has dimension {a.shape[-1]} but {name_b} has {b.shape[-1]}"
        )


def check_unit_rows(data: np.ndarray, name: str, atol: float = UNIT_NORM_ATOL) -> None:
    """Require every row to have Euclidean norm 1 within ``atol``."""
    if data.shape[0] == 0:
        return
    norms = np.linalg.norm(np.asarray(data, dtype=np.float64), axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > atol)[0]
    if bad.size:
        raise PreconditionError(
            f"{name} is not unit-normalized (row {bad[0]} has norm {norms[bad[0]]:.8f}); "
            "call normalize() first"
        )


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise ParameterError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_in_range(value, lo: float, hi: float, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v < lo or v > hi:
        raise ParameterError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return v
