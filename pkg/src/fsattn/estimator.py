"""Scikit-learn style front end for the adaptation pipeline.

Each patch-token row is a sample; predict returns the adapted per-patch
class labels, so the estimator drops into sklearn tooling (grid search
over p / lam, pipelines, scorers). The method is training-free: fit only
validates inputs and freezes the configuration.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ConfigError
from .feedback import FeedbackConfig, PipelineResult, fsa_pipeline
from .head import AttentionConfig, HeadWeights
from .metrics import miou
from .validation import as_matrix


class FeedbackAttentionSegmenter(BaseEstimator):
    """Training-free per-patch classifier driven by output feedback.

    Parameters mirror the feedback configuration; `weights` is the
    exported final-block HeadWeights and `text_embeddings` the (c, d)
    class embedding matrix. With attention_mode="external" an LxL
    row-stochastic map must be supplied.
    """

    def __init__(self, weights: HeadWeights | None = None,
                 text_embeddings=None, attention_mode: str = "qk",
                 external_attention=None, lam: float = 2.0, p: float = 0.45,
                 similarity_metric: str = "kl", pruning_mode: str = "confidence",
                 ratio: float = 0.25, threshold: float | None = None,
                 scaling: bool = True, strategy: str = "ensemble",
                 iterations: int = 1):
        self.weights = weights
        self.text_embeddings = text_embeddings
        self.attention_mode = attention_mode
        self.external_attention = external_attention
        self.lam = lam
        self.p = p
        self.similarity_metric = similarity_metric
        self.pruning_mode = pruning_mode
        self.ratio = ratio
        self.threshold = threshold
        self.scaling = scaling
        self.strategy = strategy
        self.iterations = iterations

    def _attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            mode=self.attention_mode,
            external_attention=self.external_attention,
        )

    def _feedback_config(self) -> FeedbackConfig:
        return FeedbackConfig(
            lam=self.lam, p=self.p,
            similarity_metric=self.similarity_metric,
            pruning_mode=self.pruning_mode,
            ratio=self.ratio, threshold=self.threshold,
            scaling=self.scaling, strategy=self.strategy,
            iterations=self.iterations,
        )

    def fit(self, X, y=None):
        """Validate configuration against the token matrix; nothing is learned."""
        if self.weights is None:
            raise ConfigError("weights must be provided before fitting")
        if self.text_embeddings is None:
            raise ConfigError("text_embeddings must be provided before fitting")
        x = as_matrix(X, "patch tokens")
        self._attention_config()
        self._feedback_config()
        text = as_matrix(self.text_embeddings, "text embeddings")
        self.n_features_in_ = x.shape[1]
        self.n_classes_ = text.shape[0]
        self.is_fitted_ = True
        return self

    def _check_fitted(self):
        if not getattr(self, "is_fitted_", False):
            raise NotFittedError("call fit before predict/transform")

    def run(self, X, capture_traces: bool = False) -> PipelineResult:
        """Full pipeline output for one image's token matrix."""
        self._check_fitted()
        return fsa_pipeline(
            X, self.weights, self.text_embeddings,
            self._attention_config(), self._feedback_config(),
            capture_traces=capture_traces,
        )

    def predict(self, X) -> np.ndarray:
        """Adapted per-patch class labels."""
        return self.run(X).seg_adapted

    def transform(self, X) -> np.ndarray:
        """Adapted per-patch class logits (cosine similarities)."""
        return self.run(X).logits_adapted

    def score(self, X, y) -> float:
        """Mean IoU of the adapted segmentation against labels y."""
        self._check_fitted()
        _, mean = miou(self.predict(X), y, num_classes=self.n_classes_)
        return mean
