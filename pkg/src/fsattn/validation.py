"""Input validation helpers.

Every public operation funnels its array arguments through these so that
shape and numeric-contract failures raise the same error types everywhere.
All helpers return float64 arrays; the engine computes in 64-bit even
though tensor files store 32-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array with at least one row and column.

    Raises ShapeError for wrong dimensionality and ValidationError for
    non-finite entries.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be at least 1x1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def as_index_vector(a, name: str = "labels") -> np.ndarray:
    """Coerce to a 1-D integer array (segmentation maps, planted labels)."""
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if arr.size < 1:
        raise ShapeError(f"{name} must be non-empty")
    if not np.issubdtype(arr.dtype, np.integer):
        as_float = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(as_float)) or np.any(as_float != np.round(as_float)):
            raise ValidationError(f"{name} must hold integer values")
        arr = as_float.astype(np.int64)
    return arr.astype(np.int64)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def check_square(m: np.ndarray, name: str = "matrix") -> None:
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got {m.shape}")


def check_row_stochastic(m, name: str = "attention", tol: float = 1e-5) -> np.ndarray:
    """Validate a nonnegative matrix whose rows sum to 1 within tol."""
    arr = as_matrix(m, name)
    if np.any(arr < -1e-9):
        raise ValidationError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(
            f"{name} row {i} sums to {sums[i]:.8f}, not 1 within {tol}"
        )
    return arr


def check_distribution_rows(m, name: str = "distributions", tol: float = 1e-6) -> np.ndarray:
    """Validate that each row is a probability distribution."""
    arr = as_matrix(m, name)
    if np.any(arr < 0.0):
        raise ValidationError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(
            f"{name} row {i} sums to {sums[i]:.8f}, not 1 within {tol}"
        )
    return arr
