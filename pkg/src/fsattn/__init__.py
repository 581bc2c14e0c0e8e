"""Training-free feedback-driven self-adaptive attention engine.

Given one image's patch tokens, final-block weights and class text
embeddings, the engine computes dense patch logits, feeds output-derived
patch similarity back into the attention map, and emits adapted
segmentation plus coherence-retention metrics.
"""

from .errors import (
    BadMagicError,
    ConfigError,
    DegenerateRowError,
    DegenerateVectorError,
    EngineError,
    MetricUndefinedError,
    NonFiniteValueError,
    ShapeError,
    TensorFormatError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from .linalg import MaskedMatrix, cosine_rows, matmul, row_argmax, row_softmax
from .head import (
    ATTENTION_MODES,
    AttentionConfig,
    HeadWeights,
    StageTrace,
    dense_logits,
    head_forward,
    initial_attention,
    qkv_project,
    segment,
)
from .feedback import (
    ADAPT_STRATEGIES,
    PRUNING_MODES,
    SIMILARITY_METRICS,
    FeedbackConfig,
    PipelineDiagnostics,
    PipelineResult,
    SimilarityState,
    adapt_attention,
    build_similarity_state,
    cumulative_confidence,
    divergence_to_similarity,
    feedback_attention,
    fsa_pipeline,
    isolate_logits,
    pairwise_divergence,
    prune_scale,
    uniform_attention,
)
from .metrics import RetentionReport, miou, retention_through_ops, retention_topk
from .io_formats import (
    MetricsReport,
    RunConfig,
    read_config,
    read_metrics,
    read_tensor,
    read_weights_bundle,
    write_config,
    write_metrics,
    write_tensor,
    write_weights_bundle,
)
from .synth import Fixture, SynthSpec, generate_fixture, write_fixture
from .estimator import FeedbackAttentionSegmenter

__version__ = "0.1.0"

__all__ = [
    "ADAPT_STRATEGIES",
    "ATTENTION_MODES",
    "AttentionConfig",
    "BadMagicError",
    "ConfigError",
    "DegenerateRowError",
    "DegenerateVectorError",
    "EngineError",
    "FeedbackAttentionSegmenter",
    "FeedbackConfig",
    "Fixture",
    "HeadWeights",
    "MaskedMatrix",
    "MetricUndefinedError",
    "MetricsReport",
    "NonFiniteValueError",
    "PRUNING_MODES",
    "PipelineDiagnostics",
    "PipelineResult",
    "RetentionReport",
    "RunConfig",
    "SIMILARITY_METRICS",
    "ShapeError",
    "SimilarityState",
    "StageTrace",
    "SynthSpec",
    "TensorFormatError",
    "TruncatedPayloadError",
    "ValidationError",
    "VersionMismatchError",
    "adapt_attention",
    "build_similarity_state",
    "cosine_rows",
    "cumulative_confidence",
    "dense_logits",
    "divergence_to_similarity",
    "feedback_attention",
    "fsa_pipeline",
    "generate_fixture",
    "head_forward",
    "initial_attention",
    "isolate_logits",
    "matmul",
    "miou",
    "pairwise_divergence",
    "prune_scale",
    "qkv_project",
    "read_config",
    "read_metrics",
    "read_tensor",
    "read_weights_bundle",
    "retention_through_ops",
    "retention_topk",
    "row_argmax",
    "row_softmax",
    "segment",
    "uniform_attention",
    "write_config",
    "write_fixture",
    "write_metrics",
    "write_tensor",
    "write_weights_bundle",
    "__version__",
]
