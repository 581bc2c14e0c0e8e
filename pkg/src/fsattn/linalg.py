"""Dense-matrix kernels used by every other module.

All operations are pure functions of float64 arrays: deterministic for
fixed inputs and safe to call concurrently. Row-parallel backends are
allowed because every output entry depends only on its own row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, DegenerateVectorError, ShapeError
from .validation import as_matrix, check_same_shape


@dataclass(frozen=True)
class MaskedMatrix:
    """Matrix with a boolean suppression mask (True = treat entry as -inf).

    Suppressed entries carry no information; `values` stores 0.0 there so
    the array stays finite. Softmax gives them weight exactly 0.
    """

    values: np.ndarray
    suppressed: np.ndarray

    def __post_init__(self):
        values = as_matrix(self.values, "masked matrix values")
        suppressed = np.asarray(self.suppressed, dtype=bool)
        check_same_shape(values, suppressed, "masked matrix")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "suppressed", suppressed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def keep_counts(self) -> np.ndarray:
        """Number of unsuppressed entries per row."""
        return (~self.suppressed).sum(axis=1)


def matmul(a, b) -> np.ndarray:
    """Dense product of an (m, k) by a (k, n) matrix."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def row_softmax(values, suppressed=None) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max.

    `suppressed` marks entries that must come out exactly 0; the row max
    is taken over unsuppressed entries only. A fully suppressed row raises
    DegenerateRowError.
    """
    if isinstance(values, MaskedMatrix):
        if suppressed is not None:
            raise ValueError("pass the mask either inside MaskedMatrix or separately")
        suppressed = values.suppressed
        values = values.values
    m = as_matrix(values, "softmax input")
    if suppressed is not None:
        suppressed = np.asarray(suppressed, dtype=bool)
        check_same_shape(m, suppressed, "softmax mask")
        dead = suppressed.all(axis=1)
        if dead.any():
            raise DegenerateRowError(
                f"row {int(np.argmax(dead))} has every entry suppressed"
            )
        work = np.where(suppressed, -np.inf, m)
    else:
        work = m
    shifted = work - np.max(work, axis=1, keepdims=True)
    weights = np.exp(shifted)  # exp(-inf) == 0.0, so suppressed stay exact zeros
    return weights / weights.sum(axis=1, keepdims=True)


def cosine_rows(a, b) -> np.ndarray:
    """Pairwise cosine similarity between rows of `a` and rows of `b`.

    Entry (i, j) = <a_i, b_j> / (|a_i| |b_j|), clipped to [-1, 1] against
    float round-off. Zero-norm rows raise DegenerateVectorError.
    """
    a = as_matrix(a, "left rows")
    b = as_matrix(b, "right rows")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"row dimensions disagree: {a.shape[1]} vs {b.shape[1]}"
        )
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for name, norms in (("left", na), ("right", nb)):
        if np.any(norms == 0.0):
            raise DegenerateVectorError(
                f"{name} row {int(np.argmax(norms == 0.0))} has zero norm"
            )
    sims = (a / na[:, None]) @ (b / nb[:, None]).T
    return np.clip(sims, -1.0, 1.0)


def row_argmax(values) -> np.ndarray:
    """Per-row index of the maximum, ties broken toward the lowest index."""
    m = as_matrix(values, "argmax input")
    return np.argmax(m, axis=1)
