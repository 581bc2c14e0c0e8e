"""Deterministic synthetic fixtures with planted cluster structure.

Patches are grouped into contiguous clusters; each cluster's tokens sit
around a direction that the joint projection sends onto that cluster's
class embedding, so logits are cluster-separable with a margin set by
logit_separation. The initial attention starts block-uniform within each
cluster and is corrupted row-wise: with probability attention_noise a
row redirects most of its mass onto half-cluster subsets of two other
clusters. That knocks the row's top-k neighborhood off its own cluster
while the class aggregate still favors the true cluster, which is
exactly the regime the feedback loop repairs.

All randomness comes from a 64-bit counter-based Philox generator seeded
with SynthSpec.seed, and draws happen in a fixed documented order
(text embeddings, cluster directions, token noise, FFN weights, then
per-row attention corruption), so fixtures are reproducible everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .feedback import FeedbackConfig
from .head import HeadWeights
from .io_formats import RunConfig, write_config, write_tensor, write_weights_bundle

# Mass moved off a corrupted row's own cluster; the two-cluster variant
# keeps the class aggregate on the true cluster (0.6 split two ways),
# the single-other-cluster variant must stay below 0.5 outright.
REDIRECT_MASS_MULTI = 0.6
REDIRECT_MASS_PAIR = 0.45


@dataclass(frozen=True)
class SynthSpec:
    """Shape and difficulty of a planted-cluster fixture."""

    num_patches: int = 64
    visual_dim: int = 32
    joint_dim: int = 16
    num_classes: int = 8
    num_clusters: int = 4
    attention_noise: float = 0.4
    logit_separation: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.num_patches < 1 or self.visual_dim < 1 or self.joint_dim < 1:
            raise ConfigError("num_patches, visual_dim and joint_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not (1 <= self.num_clusters <= min(self.num_patches, self.num_classes)):
            raise ConfigError(
                "num_clusters must lie in [1, min(num_patches, num_classes)], "
                f"got {self.num_clusters}"
            )
        if not (0.0 <= self.attention_noise <= 1.0):
            raise ConfigError(f"attention_noise must lie in [0, 1], got {self.attention_noise}")
        if not (math.isfinite(self.logit_separation) and self.logit_separation >= 0):
            raise ConfigError(f"logit_separation must be >= 0, got {self.logit_separation}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")


@dataclass
class Fixture:
    """In-memory result of fixture synthesis."""

    spec: SynthSpec
    tokens: np.ndarray
    weights: HeadWeights
    text: np.ndarray
    attention: np.ndarray
    labels: np.ndarray

    @property
    def cluster_members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == g) for g in range(self.spec.num_clusters)]


def _orthonormal_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    """Random rows, orthonormalized when dim allows, unit-norm otherwise."""
    g = rng.standard_normal((rows, dim))
    if dim >= rows:
        q, _ = np.linalg.qr(g.T)
        return q.T[:rows]
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def generate_fixture(spec: SynthSpec) -> Fixture:
    rng = np.random.Generator(np.random.Philox(spec.seed))
    n, v, d = spec.num_patches, spec.visual_dim, spec.joint_dim
    c, nc = spec.num_classes, spec.num_clusters

    groups = np.array_split(np.arange(n), nc)
    labels = np.empty(n, dtype=np.int64)
    for g, members in enumerate(groups):
        labels[members] = g

    text = _orthonormal_rows(rng, c, d)
    directions = _orthonormal_rows(rng, nc, v)
    tokens = spec.logit_separation * directions[labels] + rng.standard_normal((n, v))

    hidden = 2 * v
    weights = HeadWeights(
        w_q=np.eye(v), w_k=np.eye(v), w_v=np.eye(v), proj=np.eye(v),
        ffn_w1=0.02 * rng.standard_normal((v, hidden)), ffn_b1=np.zeros(hidden),
        ffn_w2=0.02 * rng.standard_normal((hidden, v)), ffn_b2=np.zeros(v),
        joint_proj=directions.T @ text[:nc],
        tau=math.sqrt(v),
    )

    attention = np.zeros((n, n))
    for g, members in enumerate(groups):
        attention[np.ix_(members, members)] = 1.0 / len(members)
    for i in range(n):
        if rng.random() >= spec.attention_noise or nc < 2:
            continue
        own = labels[i]
        others = [g for g in range(nc) if g != own]
        picked = rng.choice(len(others), size=min(2, len(others)), replace=False)
        redirect: list[np.ndarray] = []
        for idx in np.sort(picked):
            members = groups[others[idx]]
            take = math.ceil(len(members) / 2)
            redirect.append(rng.choice(members, size=take, replace=False))
        targets = np.concatenate(redirect)
        mass = REDIRECT_MASS_MULTI if nc >= 3 else REDIRECT_MASS_PAIR
        row = (1.0 - mass) * attention[i]
        row[targets] += mass / len(targets)
        attention[i] = row

    return Fixture(spec=spec, tokens=tokens, weights=weights, text=text,
                   attention=attention, labels=labels)


def write_fixture(fixture: Fixture, out_dir) -> dict[str, Path]:
    """Write tensors, the weights bundle and a ready-to-run config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "tokens": out_dir / "tokens.fsat",
        "text": out_dir / "text.fsat",
        "attention": out_dir / "attention.fsat",
        "labels": out_dir / "labels.fsat",
        "weights": out_dir / "weights",
        "config": out_dir / "config.txt",
    }
    write_tensor(paths["tokens"], fixture.tokens)
    write_tensor(paths["text"], fixture.text)
    write_tensor(paths["attention"], fixture.attention)
    write_tensor(paths["labels"], fixture.labels.astype(np.float64))
    write_weights_bundle(paths["weights"], fixture.weights)
    config = RunConfig(
        tokens=paths["tokens"],
        weights=paths["weights"],
        text=paths["text"],
        output_dir=out_dir / "out",
        attention_mode="external",
        external_attention=paths["attention"],
        labels=paths["labels"],
        feedback=FeedbackConfig(),
    )
    write_config(paths["config"], config)
    return paths
