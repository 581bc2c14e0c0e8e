"""Last attention block of a CLIP-style ViT, reduced to dense kernels.

The block is head-agnostic: multi-head attention is assumed fused into a
single LxL map before it gets here (the exporter does that). Layer norms
are likewise expected to be baked into the incoming patch tokens.
Residual and feed-forward sub-modules are switchable because several
segmentation adaptations drop them in the final layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError, ValidationError
from .linalg import cosine_rows, matmul, row_argmax, row_softmax
from .validation import as_matrix, check_row_stochastic

ATTENTION_MODES = ("qk", "qq", "kk", "vv", "external")


@dataclass(frozen=True)
class HeadWeights:
    """Projection and feed-forward parameters of the final block.

    `joint_proj` maps the visual dimension v into the shared visual-text
    dimension d. `tau` divides the attention logits; defaults to sqrt(v)
    when built via `HeadWeights.bare`.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    proj: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    joint_proj: np.ndarray
    tau: float
    use_residual: bool = False
    use_ffn: bool = False

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "proj", "ffn_w1", "ffn_w2", "joint_proj"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        for name in ("ffn_b1", "ffn_b2"):
            b = np.asarray(getattr(self, name), dtype=np.float64)
            if b.ndim != 1:
                raise ShapeError(f"{name} must be 1-D, got ndim={b.ndim}")
            if not np.all(np.isfinite(b)):
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, b)
        v = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "proj"):
            if getattr(self, name).shape != (v, v):
                raise ShapeError(f"{name} must be {v}x{v}, got {getattr(self, name).shape}")
        h = self.ffn_w1.shape[1]
        if self.ffn_w1.shape != (v, h) or self.ffn_b1.shape != (h,):
            raise ShapeError("ffn first layer shapes inconsistent with v, h")
        if self.ffn_w2.shape != (h, v) or self.ffn_b2.shape != (v,):
            raise ShapeError("ffn second layer shapes inconsistent with h, v")
        if self.joint_proj.shape[0] != v:
            raise ShapeError(
                f"joint_proj must have {v} rows, got {self.joint_proj.shape[0]}"
            )
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValidationError(f"tau must be positive, got {self.tau}")

    @property
    def visual_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def joint_dim(self) -> int:
        return self.joint_proj.shape[1]

    @classmethod
    def bare(cls, v: int, d: int | None = None, hidden: int | None = None,
             tau: float | None = None, **flags) -> "HeadWeights":
        """Identity projections and zero feed-forward: Z reduces to attn @ V.

        Matches the configuration where residual and FFN are dropped from
        the final layer.
        """
        d = v if d is None else d
        hidden = 2 * v if hidden is None else hidden
        eye = np.eye(v)
        joint = np.eye(v, d)
        return cls(
            w_q=eye, w_k=eye.copy(), w_v=eye.copy(), proj=eye.copy(),
            ffn_w1=np.zeros((v, hidden)), ffn_b1=np.zeros(hidden),
            ffn_w2=np.zeros((hidden, v)), ffn_b2=np.zeros(v),
            joint_proj=joint, tau=math.sqrt(v) if tau is None else tau,
            **flags,
        )


@dataclass(frozen=True)
class AttentionConfig:
    """How the initial LxL attention map is produced.

    `external` supplies a precomputed row-stochastic map (e.g. derived
    from a vision foundation model) and bypasses Q/K/V entirely.
    """

    mode: str = "qk"
    external_attention: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ATTENTION_MODES:
            raise ConfigError(
                f"attention mode must be one of {ATTENTION_MODES}, got {self.mode!r}"
            )
        if self.mode == "external":
            if self.external_attention is None:
                raise ConfigError("external attention mode requires a matrix")
            ext = check_row_stochastic(
                self.external_attention, "external attention", tol=1e-5
            )
            if ext.shape[0] != ext.shape[1]:
                raise ShapeError(f"external attention must be square, got {ext.shape}")
            object.__setattr__(self, "external_attention", ext)


@dataclass
class StageTrace:
    """Features captured after each head operation, in pipeline order."""

    stages: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def add(self, name: str, features: np.ndarray) -> None:
        self.stages.append((name, features))

    def names(self) -> list[str]:
        return [name for name, _ in self.stages]


STAGE_NAMES = ("context", "post_proj", "post_residual", "post_ffn", "post_joint")


def qkv_project(tokens, weights: HeadWeights):
    """Project patch tokens to queries, keys and values."""
    x = as_matrix(tokens, "patch tokens")
    if x.shape[1] != weights.visual_dim:
        raise ShapeError(
            f"tokens have dim {x.shape[1]}, weights expect {weights.visual_dim}"
        )
    return matmul(x, weights.w_q), matmul(x, weights.w_k), matmul(x, weights.w_v)


def initial_attention(q, k, v, config: AttentionConfig, tau: float) -> np.ndarray:
    """Build the initial attention map for the configured mode.

    qk uses softmax(Q K^T / tau); qq/kk/vv replace both operands with the
    named matrix (self-self attention); external passes the supplied map
    through unchanged.
    """
    if config.mode == "external":
        if config.external_attention is None:
            raise ConfigError("external attention mode requires a matrix")
        return config.external_attention
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    source = {"qk": (q, k), "qq": (q, q), "kk": (k, k), "vv": (v, v)}[config.mode]
    scores = matmul(source[0], source[1].T) / tau
    return row_softmax(scores)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def head_forward(attn, tokens, weights: HeadWeights,
                 trace: StageTrace | None = None) -> np.ndarray:
    """Run the final block under a given attention map.

    context = attn @ V; y = [x +] context @ proj; z = y [+ FFN(y)];
    returns z @ joint_proj. Pass a StageTrace to capture features after
    each operation.
    """
    x = as_matrix(tokens, "patch tokens")
    attn = check_row_stochastic(attn, "attention", tol=1e-5)
    if attn.shape[0] != x.shape[0]:
        raise ShapeError(
            f"attention is {attn.shape[0]}x{attn.shape[1]} but there are {x.shape[0]} tokens"
        )
    _, _, values = qkv_project(x, weights)

    context = matmul(attn, values)
    if trace is not None:
        trace.add("context", context)
    projected = matmul(context, weights.proj)
    if trace is not None:
        trace.add("post_proj", projected)
    y = x + projected if weights.use_residual else projected
    if trace is not None:
        trace.add("post_residual", y)
    if weights.use_ffn:
        hidden = _gelu(y @ weights.ffn_w1 + weights.ffn_b1)
        y = y + (hidden @ weights.ffn_w2 + weights.ffn_b2)
    if trace is not None:
        trace.add("post_ffn", y)
    joint = matmul(y, weights.joint_proj)
    if trace is not None:
        trace.add("post_joint", joint)
    return joint


def dense_logits(joint_features, text_embeddings) -> np.ndarray:
    """Per-patch cosine similarity against each class text embedding."""
    t = as_matrix(text_embeddings, "text embeddings")
    if t.shape[0] < 2:
        raise ValidationError(f"need at least 2 classes, got {t.shape[0]}")
    return cosine_rows(joint_features, t)


def segment(logits) -> np.ndarray:
    """Argmax class per patch (ties toward the lower class index)."""
    y = as_matrix(logits, "dense logits")
    if y.shape[1] < 2:
        raise ValidationError(f"need at least 2 classes, got {y.shape[1]}")
    return row_argmax(y)
