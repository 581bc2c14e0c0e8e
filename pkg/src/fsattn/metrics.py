"""Spatial-coherence retention and segmentation scoring.

Retention asks: of each patch's k most-attended neighbors (self excluded),
is at least one predicted to the same class? The per-stage variant tracks
how well the most-attended neighbor survives the head's own operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError, ShapeError, ValidationError
from .head import StageTrace
from .linalg import cosine_rows
from .validation import as_index_vector, as_matrix, check_square


@dataclass(frozen=True)
class RetentionReport:
    """Outcome of one retention measurement."""

    k: int
    retention: float
    per_patch_hits: np.ndarray


def _top_k_indices(row: np.ndarray, k: int) -> np.ndarray:
    # Stable descending sort so ties go to the lower patch index.
    return np.argsort(-row, kind="stable")[:k]


def retention_topk(attn, segmentation, k: int) -> RetentionReport:
    """Fraction of patches with a same-class patch among their top-k neighbors.

    The diagonal is zeroed first so a patch cannot count itself; ties in
    the attention row break toward the lower index.
    """
    a = as_matrix(attn, "attention")
    check_square(a, "attention")
    seg = as_index_vector(segmentation, "segmentation")
    n = a.shape[0]
    if seg.shape[0] != n:
        raise ShapeError(f"segmentation length {seg.shape[0]} != {n} patches")
    if n < 2:
        raise MetricUndefinedError("retention needs at least 2 patches")
    if not (1 <= k <= n - 1):
        raise MetricUndefinedError(f"k must lie in [1, {n - 1}], got {k}")
    work = a.copy()
    np.fill_diagonal(work, 0.0)
    hits = np.empty(n, dtype=bool)
    for i in range(n):
        neighbors = _top_k_indices(work[i], k)
        hits[i] = bool(np.any(seg[neighbors] == seg[i]))
    return RetentionReport(k=k, retention=float(hits.mean()), per_patch_hits=hits)


def retention_through_ops(attn_init, trace: StageTrace, k: int = 10) -> dict[str, float]:
    """Per-stage survival of each patch's most-attended neighbor.

    For patch i let j* be the argmax of row i of the initial attention
    (diagonal zeroed). At each traced stage, features are compared by
    pairwise cosine similarity and we report the fraction of patches
    whose j* is among the k most similar patches to i (self excluded,
    ties to the lower index). k is capped at L - 1.
    """
    a = as_matrix(attn_init, "attention")
    check_square(a, "attention")
    n = a.shape[0]
    if n < 2:
        raise MetricUndefinedError("per-stage retention needs at least 2 patches")
    if k < 1:
        raise MetricUndefinedError(f"k must be >= 1, got {k}")
    k = min(k, n - 1)
    work = a.copy()
    np.fill_diagonal(work, 0.0)
    anchor = np.argmax(work, axis=1)

    fractions: dict[str, float] = {}
    for name, features in trace.stages:
        feats = as_matrix(features, f"stage {name!r} features")
        if feats.shape[0] != n:
            raise ShapeError(
                f"stage {name!r} has {feats.shape[0]} rows for {n} patches"
            )
        sims = cosine_rows(feats, feats)
        hits = 0
        for i in range(n):
            row = sims[i].copy()
            row[i] = -np.inf  # exclusion mirrors the zeroed diagonal above
            if anchor[i] in _top_k_indices(row, k):
                hits += 1
        fractions[name] = hits / n
    return fractions


def miou(pred, gt, num_classes: int, ignore_index: int | None = None):
    """Per-class intersection-over-union and its mean.

    Classes absent from both maps are excluded from the mean (their slot
    in the per-class vector is NaN). Positions labelled ignore_index in
    either map are dropped from all counts.
    """
    p = as_index_vector(pred, "pred")
    g = as_index_vector(gt, "gt")
    if p.shape[0] != g.shape[0]:
        raise ShapeError(f"pred length {p.shape[0]} != gt length {g.shape[0]}")
    if num_classes < 1:
        raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
    for name, arr in (("pred", p), ("gt", g)):
        in_range = (arr >= 0) & (arr < num_classes)
        if ignore_index is not None:
            in_range |= arr == ignore_index
        if not np.all(in_range):
            bad = arr[~in_range][0]
            raise ValidationError(f"{name} contains out-of-range label {bad}")
    if ignore_index is not None:
        valid = (p != ignore_index) & (g != ignore_index)
        p, g = p[valid], g[valid]

    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        pred_c = p == c
        gt_c = g == c
        union = np.count_nonzero(pred_c | gt_c)
        if union == 0:
            continue
        per_class[c] = np.count_nonzero(pred_c & gt_c) / union
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean
