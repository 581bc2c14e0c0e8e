"""Shared test helpers: random stochastic matrices, distributions, weights."""

import numpy as np
import pytest

from fsattn import HeadWeights


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_stochastic(rng, rows, cols=None):
    """Random strictly positive row-stochastic matrix."""
    cols = rows if cols is None else cols
    raw = rng.random((rows, cols)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def random_distributions(rng, rows, cols):
    """Random probability rows bounded away from zero mass."""
    raw = rng.dirichlet(np.ones(cols), size=rows)
    return np.maximum(raw, 1e-9) / np.maximum(raw, 1e-9).sum(axis=1, keepdims=True)


def random_weights(rng, v, d=None, hidden=None, **flags):
    """Small random head weights for numeric cross-checks."""
    d = v if d is None else d
    hidden = 2 * v if hidden is None else hidden
    return HeadWeights(
        w_q=0.3 * rng.standard_normal((v, v)),
        w_k=0.3 * rng.standard_normal((v, v)),
        w_v=0.3 * rng.standard_normal((v, v)),
        proj=0.3 * rng.standard_normal((v, v)),
        ffn_w1=0.3 * rng.standard_normal((v, hidden)),
        ffn_b1=0.1 * rng.standard_normal(hidden),
        ffn_w2=0.3 * rng.standard_normal((hidden, v)),
        ffn_b2=0.1 * rng.standard_normal(v),
        joint_proj=0.3 * rng.standard_normal((v, d)),
        tau=float(np.sqrt(v)),
        **flags,
    )
