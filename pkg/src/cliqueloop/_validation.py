"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatchError, NonFiniteError


def check_matrix(x, name="array", ncols=None, dtype=np.float64, allow_empty=True):
    """Coerce ``x`` to a 2-D float array and validate it.

    Raises NonFiniteError on NaN/inf and DimensionMismatchError when the
    column count differs from ``ncols``.
    """
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, ncols or 0)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if ncols is not None and arr.shape[1] != ncols:
        raise DimensionMismatchError(
            f"{name} has {arr.shape[1]} columns, expected {ncols}"
        )
    if not allow_empty and arr.shape[0] == 0:
        raise DimensionMismatchError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def check_vector(x, name="vector", size=None, dtype=np.float64):
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise DimensionMismatchError(f"{name} has length {arr.shape[0]}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def check_same_length(a, b, names=("a", "b")):
    if len(a) != len(b):
        raise DimensionMismatchError(
            f"{names[0]} and {names[1]} differ in length ({len(a)} != {len(b)})"
        )


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def check_fraction(value, name, low_open=True, high_closed=True):
    """Validate ``value`` lies in (0, 1] (default) and return it."""
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value <= 1 if high_closed else value < 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} out of range: {value!r}")
    return value
