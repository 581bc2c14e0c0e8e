"""Output-feedback adaptation of the initial attention map.

The loop: run the head once with the real attention and once with a
uniform map, subtract the uniform branch so the logits reflect only the
selective attention pattern, turn pairwise logit similarity into a sparse
feedback attention, and fold that back into the head. Everything is
training-free; no weight is ever updated.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .head import (
    AttentionConfig,
    HeadWeights,
    StageTrace,
    dense_logits,
    head_forward,
    initial_attention,
    qkv_project,
    segment,
)
from .linalg import MaskedMatrix, cosine_rows, matmul, row_softmax
from .validation import (
    as_matrix,
    check_distribution_rows,
    check_row_stochastic,
    check_same_shape,
    check_square,
)

SIMILARITY_METRICS = ("kl", "cosine")
PRUNING_MODES = ("confidence", "fixed_ratio", "fixed_threshold", "none")
ADAPT_STRATEGIES = ("refine", "precondition", "replace", "ensemble")

# Probabilities below this are treated as this value inside logs.
KL_CLAMP = 1e-12


@dataclass(frozen=True)
class FeedbackConfig:
    """Knobs of the feedback loop.

    lam sharpens kept similarities (s -> s * e^(lam * s)); p is the
    cumulative-confidence cutoff. The defaults are the empirical working
    point. ratio/threshold only apply to their respective pruning modes;
    threshold None means 1/L at evaluation time.
    """

    lam: float = 2.0
    p: float = 0.45
    similarity_metric: str = "kl"
    pruning_mode: str = "confidence"
    ratio: float = 0.25
    threshold: float | None = None
    scaling: bool = True
    strategy: str = "ensemble"
    iterations: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lam must be a nonnegative finite value, got {self.lam}")
        if not (0.0 < self.p <= 1.0):
            raise ConfigError(f"p must lie in (0, 1], got {self.p}")
        if self.similarity_metric not in SIMILARITY_METRICS:
            raise ConfigError(
                f"similarity_metric must be one of {SIMILARITY_METRICS}, "
                f"got {self.similarity_metric!r}"
            )
        if self.pruning_mode not in PRUNING_MODES:
            raise ConfigError(
                f"pruning_mode must be one of {PRUNING_MODES}, got {self.pruning_mode!r}"
            )
        if not (0.0 < self.ratio <= 1.0):
            raise ConfigError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.threshold is not None and not (
            math.isfinite(self.threshold) and self.threshold >= 0
        ):
            raise ConfigError(f"threshold must be nonnegative, got {self.threshold}")
        if self.strategy not in ADAPT_STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {ADAPT_STRATEGIES}, got {self.strategy!r}"
            )
        if not (isinstance(self.iterations, int) and self.iterations >= 1):
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}")


@dataclass(frozen=True)
class SimilarityState:
    """Intermediate products of one feedback pass.

    divergence is None when the cosine metric produced similarity
    directly. order holds each row's descending sort permutation of
    confidence (stable, ties to the lower patch index).
    """

    divergence: np.ndarray | None
    similarity: np.ndarray
    confidence: np.ndarray
    cum_conf: np.ndarray
    order: np.ndarray
    sparse: MaskedMatrix


def uniform_attention(num_patches: int) -> np.ndarray:
    """LxL map attending every patch equally."""
    if not (isinstance(num_patches, (int, np.integer)) and num_patches >= 1):
        raise ShapeError(f"patch count must be >= 1, got {num_patches}")
    n = int(num_patches)
    return np.full((n, n), 1.0 / n)


def isolate_logits(logits, uniform_logits) -> np.ndarray:
    """Per-patch softmax of (logits - uniform-branch logits).

    Subtracting the uniform branch removes the globally spread-out
    context, leaving the net effect of the selective attention pattern.
    """
    y = as_matrix(logits, "logits")
    y_uni = as_matrix(uniform_logits, "uniform logits")
    check_same_shape(y, y_uni, "logit isolation")
    return row_softmax(y - y_uni)


def pairwise_divergence(isolated, metric: str = "kl") -> np.ndarray:
    """Pairwise relation between patch output distributions.

    kl: returns D with D[i, j] = KL(row_i || row_j) in nats, zero-mass
    terms contribute 0 and log arguments are clamped at 1e-12. The
    diagonal is exactly 0 and the matrix is floored at 0.
    cosine: skips the divergence detour and returns similarity directly,
    mapped to [0, 1] via (1 + cos) / 2.
    """
    if metric not in SIMILARITY_METRICS:
        raise ConfigError(f"unknown similarity metric {metric!r}")
    rows = check_distribution_rows(isolated, "isolated logits", tol=1e-6)
    if metric == "cosine":
        return (1.0 + cosine_rows(rows, rows)) / 2.0
    log_rows = np.log(np.maximum(rows, KL_CLAMP))
    cross = rows @ log_rows.T  # cross[i, j] = sum_k rows[i, k] * log rows[j, k]
    div = np.diagonal(cross)[:, None] - cross
    return np.maximum(div, 0.0)


def divergence_to_similarity(divergence) -> np.ndarray:
    """Map divergences in [0, inf) to similarities in (0, 1]: s = 1/(d+1)."""
    d = as_matrix(divergence, "divergence")
    if np.any(d < 0.0):
        raise ValidationError("divergence must be nonnegative")
    return 1.0 / (d + 1.0)


def cumulative_confidence(similarity):
    """Row-softmax the similarity map and accumulate it in confidence order.

    Returns (confidence, cum_conf, order): confidence is the row-stochastic
    softmax of similarity; order[i] sorts row i descending (stable, ties to
    the lower patch index); cum_conf holds inclusive prefix sums of the
    sorted confidences, reverted to the original column order.
    """
    s = as_matrix(similarity, "similarity")
    confidence = row_softmax(s)
    order = np.argsort(-confidence, axis=1, kind="stable")
    prefix = np.cumsum(np.take_along_axis(confidence, order, axis=1), axis=1)
    cum_conf = np.empty_like(prefix)
    np.put_along_axis(cum_conf, order, prefix, axis=1)
    return confidence, cum_conf, order


def prune_scale(similarity, confidence, cum_conf, order,
                config: FeedbackConfig) -> MaskedMatrix:
    """Suppress low-confidence patches and sharpen the survivors.

    confidence mode keeps entry (i, j) iff its inclusive cumulative
    confidence is <= p, with each row's top-ranked entry always kept, so
    a row keeps the most confident patches until their combined confidence
    reaches p. fixed_ratio keeps the top ceil(ratio * L) entries per row;
    fixed_threshold keeps confidences >= threshold (default 1/L) plus the
    top entry; none keeps everything. Kept similarities become
    s * e^(lam * s) when scaling is on.
    """
    s = as_matrix(similarity, "similarity")
    confidence = as_matrix(confidence, "confidence")
    cum_conf = as_matrix(cum_conf, "cumulative confidence")
    check_same_shape(s, confidence, "pruning")
    check_same_shape(s, cum_conf, "pruning")
    order = np.asarray(order)
    if order.shape != s.shape:
        raise ShapeError(f"sort order shape {order.shape} != similarity {s.shape}")
    n, width = s.shape
    row_ids = np.arange(n)

    if config.pruning_mode == "confidence":
        keep = cum_conf <= config.p
        keep[row_ids, order[:, 0]] = True
    elif config.pruning_mode == "fixed_ratio":
        count = min(width, math.ceil(config.ratio * width))
        keep = np.zeros_like(s, dtype=bool)
        np.put_along_axis(keep, order[:, :count], True, axis=1)
    elif config.pruning_mode == "fixed_threshold":
        cutoff = (1.0 / width) if config.threshold is None else config.threshold
        keep = confidence >= cutoff
        keep[row_ids, order[:, 0]] = True
    else:  # none
        keep = np.ones_like(s, dtype=bool)

    kept_values = s * np.exp(config.lam * s) if config.scaling else s
    return MaskedMatrix(np.where(keep, kept_values, 0.0), ~keep)


def feedback_attention(sparse: MaskedMatrix) -> np.ndarray:
    """Row-softmax of the sparse similarity map; suppressed entries are 0."""
    return row_softmax(sparse)


def adapt_attention(attn_init, feedback, strategy: str) -> np.ndarray:
    """Fold the feedback attention back into the initial map.

    refine applies feedback after the initial attention (feedback @ attn),
    precondition before it (attn @ feedback), replace uses feedback alone,
    and ensemble averages all three. Products of row-stochastic matrices
    stay row-stochastic, so the result is a valid attention map.
    """
    if strategy not in ADAPT_STRATEGIES:
        raise ConfigError(f"unknown adaptation strategy {strategy!r}")
    attn = check_row_stochastic(attn_init, "initial attention", tol=1e-5)
    fb = check_row_stochastic(feedback, "feedback attention", tol=1e-5)
    check_square(attn, "initial attention")
    check_same_shape(attn, fb, "adaptation")
    if strategy == "refine":
        return matmul(fb, attn)
    if strategy == "precondition":
        return matmul(attn, fb)
    if strategy == "replace":
        return fb
    return (matmul(fb, attn) + matmul(attn, fb) + fb) / 3.0


def build_similarity_state(isolated, config: FeedbackConfig) -> SimilarityState:
    """Compose divergence -> similarity -> confidence -> pruning."""
    if config.similarity_metric == "kl":
        divergence = pairwise_divergence(isolated, "kl")
        similarity = divergence_to_similarity(divergence)
    else:
        divergence = None
        similarity = pairwise_divergence(isolated, "cosine")
    confidence, cum_conf, order = cumulative_confidence(similarity)
    sparse = prune_scale(similarity, confidence, cum_conf, order, config)
    return SimilarityState(divergence, similarity, confidence, cum_conf, order, sparse)


@dataclass
class PipelineDiagnostics:
    """Timing and pruning bookkeeping from a pipeline run."""

    timings_ms: dict[str, float] = field(default_factory=dict)
    keep_counts: np.ndarray | None = None
    iterations: int = 1


@dataclass
class PipelineResult:
    """Everything one image's adaptation produced."""

    attn_init: np.ndarray
    attn_adapted: np.ndarray
    feedback: np.ndarray
    logits_init: np.ndarray
    logits_adapted: np.ndarray
    seg_init: np.ndarray
    seg_adapted: np.ndarray
    diagnostics: PipelineDiagnostics
    state: SimilarityState
    trace_init: StageTrace | None = None
    trace_adapted: StageTrace | None = None


class _Timer:
    def __init__(self):
        self.acc: dict[str, float] = {}
        self._start = time.perf_counter()

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.acc[name] = self.acc.get(name, 0.0) + (now - self._start) * 1e3
        self._start = now

    def reset(self) -> None:
        self._start = time.perf_counter()


def fsa_pipeline(tokens, weights: HeadWeights, text_embeddings,
                 attention_config: AttentionConfig,
                 feedback_config: FeedbackConfig,
                 capture_traces: bool = False) -> PipelineResult:
    """Run the full adaptation for one image.

    Each iteration forwards the current attention and the uniform map
    under identical head flags, isolates the logits, builds the sparse
    feedback attention, and adapts. With iterations > 1 the adapted map
    becomes the next iteration's input and the uniform branch is
    recomputed.
    """
    x = as_matrix(tokens, "patch tokens")
    text = as_matrix(text_embeddings, "text embeddings")
    num_patches = x.shape[0]
    timer = _Timer()

    q, k, v = qkv_project(x, weights)
    attn_init = initial_attention(q, k, v, attention_config, weights.tau)
    if attn_init.shape[0] != num_patches:
        raise ShapeError(
            f"attention is {attn_init.shape[0]}x{attn_init.shape[1]} "
            f"for {num_patches} patches"
        )
    timer.lap("initial_attention")

    trace_init = StageTrace() if capture_traces else None
    attn_cur = attn_init
    logits_cur = dense_logits(head_forward(attn_cur, x, weights, trace_init), text)
    timer.lap("forward_initial")
    logits_init = logits_cur
    seg_init = segment(logits_init)

    uniform = uniform_attention(num_patches)
    state = None
    fb = None
    trace_adapted = None
    for _ in range(feedback_config.iterations):
        timer.reset()
        logits_uni = dense_logits(head_forward(uniform, x, weights), text)
        timer.lap("forward_uniform")
        isolated = isolate_logits(logits_cur, logits_uni)
        timer.lap("isolation")
        state = build_similarity_state(isolated, feedback_config)
        timer.lap("similarity")
        fb = feedback_attention(state.sparse)
        timer.lap("feedback")
        attn_cur = adapt_attention(attn_cur, fb, feedback_config.strategy)
        timer.lap("adaptation")
        trace_adapted = StageTrace() if capture_traces else None
        logits_cur = dense_logits(head_forward(attn_cur, x, weights, trace_adapted), text)
        timer.lap("forward_adapted")

    logits_adapted = logits_cur
    seg_adapted = segment(logits_adapted)
    timer.reset()
    diagnostics = PipelineDiagnostics(
        timings_ms=dict(timer.acc),
        keep_counts=state.sparse.keep_counts(),
        iterations=feedback_config.iterations,
    )
    diagnostics.timings_ms["total"] = sum(timer.acc.values())
    return PipelineResult(
        attn_init=attn_init,
        attn_adapted=attn_cur,
        feedback=fb,
        logits_init=logits_init,
        logits_adapted=logits_adapted,
        seg_init=seg_init,
        seg_adapted=seg_adapted,
        diagnostics=diagnostics,
        state=state,
        trace_init=trace_init,
        trace_adapted=trace_adapted,
    )
