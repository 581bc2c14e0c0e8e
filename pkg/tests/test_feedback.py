"""Feedback-loop contracts: isolation, similarity, pruning, adaptation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsattn import (
    AttentionConfig,
    ConfigError,
    FeedbackConfig,
    HeadWeights,
    ValidationError,
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

from conftest import random_distributions, random_stochastic
from oracles import cumulative_confidence_row_reference, kl_scalar, softmax_scalar


class TestUniformAttention:
    def test_single_patch(self):
        np.testing.assert_array_equal(uniform_attention(1), [[1.0]])

    def test_four_patches(self):
        out = uniform_attention(4)
        np.testing.assert_array_equal(out, np.full((4, 4), 0.25))

    def test_power_of_two_rows_sum_exactly(self):
        for n in (2, 8, 64):
            assert np.all(uniform_attention(n).sum(axis=1) == 1.0)

    def test_invalid_count(self):
        with pytest.raises(Exception):
            uniform_attention(0)


class TestIsolateLogits:
    def test_zero_difference_gives_uniform(self, rng):
        y = rng.standard_normal((4, 5))
        out = isolate_logits(y, y)
        np.testing.assert_allclose(out, np.full((4, 5), 0.2), atol=1e-15)

    def test_log_two_row(self):
        out = isolate_logits(np.array([[math.log(2.0), 0.0, 0.0]]), np.zeros((1, 3)))
        np.testing.assert_allclose(out, [[0.5, 0.25, 0.25]], atol=1e-15)

    def test_per_patch_shift_invariance(self, rng):
        y = rng.standard_normal((6, 4))
        y_uni = rng.standard_normal((6, 4))
        shift = rng.standard_normal((6, 1))
        np.testing.assert_allclose(
            isolate_logits(y, y_uni), isolate_logits(y + shift, y_uni + shift),
            atol=1e-12,
        )

    def test_shape_mismatch(self, rng):
        with pytest.raises(Exception):
            isolate_logits(rng.standard_normal((2, 3)), rng.standard_normal((3, 2)))


class TestPairwiseDivergence:
    def test_identical_rows_zero(self):
        rows = np.tile([0.2, 0.3, 0.5], (3, 1))
        np.testing.assert_allclose(pairwise_divergence(rows), 0.0, atol=1e-15)

    def test_hand_value_and_orientation(self):
        rows = np.array([[0.5, 0.5], [0.25, 0.75]])
        div = pairwise_divergence(rows)
        # scalar oracle: KL([.5,.5] || [.25,.75]) = .5 ln 2 + .5 ln(2/3)
        expected_01 = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        expected_10 = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
        assert div[0, 1] == pytest.approx(expected_01, abs=1e-12)
        assert div[1, 0] == pytest.approx(expected_10, abs=1e-12)
        assert expected_01 == pytest.approx(0.14384, abs=5e-6)

    def test_diagonal_exactly_zero(self, rng):
        rows = random_distributions(rng, 12, 7)
        div = pairwise_divergence(rows)
        assert np.all(np.diagonal(div) == 0.0)

    def test_matches_scalar_oracle(self, rng):
        rows = random_distributions(rng, 6, 5)
        div = pairwise_divergence(rows)
        for i in range(6):
            for j in range(6):
                assert div[i, j] == pytest.approx(
                    max(kl_scalar(rows[i], rows[j]), 0.0), abs=1e-12
                )

    @given(n=st.integers(2, 32), c=st.integers(2, 16), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_with_zero_diagonal(self, n, c, seed):
        rows = random_distributions(np.random.default_rng(seed), n, c)
        div = pairwise_divergence(rows)
        assert np.all(div >= 0.0)
        assert np.all(np.diagonal(div) == 0.0)

    def test_cosine_mode_identical_rows(self):
        rows = np.tile([0.25, 0.75], (2, 1))
        sim = pairwise_divergence(rows, metric="cosine")
        np.testing.assert_allclose(sim, 1.0, atol=1e-12)

    def test_cosine_mode_mapping(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        sim = pairwise_divergence(rows, metric="cosine")
        assert sim[0, 1] == pytest.approx(0.5, abs=1e-12)

    def test_rejects_non_distribution(self):
        with pytest.raises(ValidationError):
            pairwise_divergence(np.array([[0.5, 0.6], [0.2, 0.8]]))

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            pairwise_divergence(np.array([[1.0, 0.0]]), metric="l2")


class TestDivergenceToSimilarity:
    def test_zero_maps_to_one(self):
        np.testing.assert_array_equal(divergence_to_similarity(np.zeros((2, 2))), 1.0)

    def test_unit_divergence(self):
        assert divergence_to_similarity(np.array([[1.0]]))[0, 0] == 0.5

    def test_continues_kl_example(self):
        d = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        s = divergence_to_similarity(np.array([[d]]))[0, 0]
        assert s == pytest.approx(1.0 / (d + 1.0), abs=1e-15)
        assert s == pytest.approx(0.87425, abs=5e-6)

    def test_monotone_decreasing(self, rng):
        d = np.sort(rng.uniform(0, 10, size=(1, 20)))
        s = divergence_to_similarity(d)
        assert np.all(np.diff(s[0]) <= 0)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            divergence_to_similarity(np.array([[-0.1]]))


class TestCumulativeConfidence:
    def test_single_patch(self):
        confidence, cum, order = cumulative_confidence(np.array([[1.0]]))
        np.testing.assert_array_equal(confidence, [[1.0]])
        np.testing.assert_array_equal(cum, [[1.0]])
        assert order.tolist() == [[0]]

    def test_worked_example(self):
        # scalar softmax + prefix-sum oracle on [1.0, 0.5, 0.2]
        expected_conf = softmax_scalar([1.0, 0.5, 0.2])
        confidence, cum, order = cumulative_confidence(np.array([[1.0, 0.5, 0.2]]))
        np.testing.assert_allclose(confidence[0], expected_conf, atol=1e-12)
        np.testing.assert_allclose(confidence[0], [0.4864, 0.2950, 0.2186], atol=5e-5)
        np.testing.assert_allclose(
            cum[0],
            np.cumsum(expected_conf),
            atol=1e-12,
        )
        np.testing.assert_allclose(cum[0], [0.4864, 0.7814, 1.0], atol=5e-5)
        assert order.tolist() == [[0, 1, 2]]

    def test_all_equal_row_ties_break_by_index(self):
        confidence, cum, order = cumulative_confidence(np.full((1, 4), 0.7))
        np.testing.assert_allclose(confidence, 0.25, atol=1e-15)
        assert order.tolist() == [[0, 1, 2, 3]]
        np.testing.assert_allclose(cum[0], [0.25, 0.5, 0.75, 1.0], atol=1e-12)

    def test_last_sorted_prefix_is_one(self, rng):
        s = rng.uniform(0.01, 1.0, size=(10, 10))
        _, cum, order = cumulative_confidence(s)
        last = cum[np.arange(10), order[:, -1]]
        np.testing.assert_allclose(last, 1.0, atol=1e-6)

    def test_revert_against_sorted_prefix(self, rng):
        s = rng.uniform(0.0, 1.0, size=(5, 8))
        confidence, cum, order = cumulative_confidence(s)
        for i in range(5):
            sorted_conf = confidence[i, order[i]]
            assert np.all(np.diff(sorted_conf) <= 1e-15)
            np.testing.assert_allclose(cum[i, order[i]], np.cumsum(sorted_conf), atol=1e-12)

    def test_matches_sort_free_reference(self, rng):
        for n in (2, 5, 8):
            s = rng.uniform(0.0, 1.0, size=(6, n))
            confidence, cum, _ = cumulative_confidence(s)
            for i in range(6):
                ref_conf, ref_cum, _ = cumulative_confidence_row_reference(s[i], p=0.5)
                np.testing.assert_allclose(confidence[i], ref_conf, atol=1e-12)
                np.testing.assert_allclose(cum[i], ref_cum, atol=1e-12)


def _prune(s_rows, config):
    confidence, cum, order = cumulative_confidence(s_rows)
    return prune_scale(s_rows, confidence, cum, order, config)


class TestPruneScale:
    def test_worked_example_tight_cutoff(self):
        s = np.array([[1.0, 0.5, 0.2]])
        sparse = _prune(s, FeedbackConfig(p=0.45, lam=2.0))
        # top entry's own cumulative confidence exceeds p, guard keeps it alone
        assert sparse.suppressed.tolist() == [[False, True, True]]
        assert sparse.values[0, 0] == pytest.approx(1.0 * math.exp(2.0), abs=1e-12)
        assert sparse.values[0, 0] == pytest.approx(7.389056, abs=1e-5)

    def test_worked_example_loose_cutoff(self):
        s = np.array([[1.0, 0.5, 0.2]])
        sparse = _prune(s, FeedbackConfig(p=0.8, lam=2.0))
        assert sparse.suppressed.tolist() == [[False, False, True]]
        assert sparse.values[0, 1] == pytest.approx(0.5 * math.exp(1.0), abs=1e-12)
        assert sparse.values[0, 1] == pytest.approx(1.35914, abs=1e-5)

    def test_none_mode_without_scaling_is_identity(self, rng):
        s = rng.uniform(0.1, 1.0, size=(5, 5))
        sparse = _prune(s, FeedbackConfig(pruning_mode="none", scaling=False))
        np.testing.assert_array_equal(sparse.values, s)
        assert not sparse.suppressed.any()

    def test_fixed_ratio_keeps_ceil(self, rng):
        s = rng.uniform(0.1, 1.0, size=(6, 10))
        sparse = _prune(s, FeedbackConfig(pruning_mode="fixed_ratio", ratio=0.25))
        assert np.all(sparse.keep_counts() == math.ceil(0.25 * 10))

    def test_fixed_ratio_keeps_most_confident(self, rng):
        s = rng.uniform(0.1, 1.0, size=(4, 8))
        confidence, cum, order = cumulative_confidence(s)
        sparse = prune_scale(s, confidence, cum, order,
                             FeedbackConfig(pruning_mode="fixed_ratio", ratio=0.5))
        for i in range(4):
            kept = set(np.flatnonzero(~sparse.suppressed[i]))
            assert kept == set(order[i, :4])

    def test_fixed_threshold_with_guard(self):
        s = np.array([[1.0, 0.5, 0.2]])
        config = FeedbackConfig(pruning_mode="fixed_threshold", threshold=0.99)
        sparse = _prune(s, config)
        # nothing clears an impossible threshold, the top entry survives anyway
        assert sparse.suppressed.tolist() == [[False, True, True]]

    def test_fixed_threshold_default_is_one_over_width(self, rng):
        s = rng.uniform(0.4, 0.6, size=(5, 8))
        sparse = _prune(s, FeedbackConfig(pruning_mode="fixed_threshold"))
        confidence, _, _ = cumulative_confidence(s)
        np.testing.assert_array_equal(~sparse.suppressed, confidence >= 1.0 / 8)

    def test_every_row_keeps_at_least_one(self, rng):
        for _ in range(20):
            s = rng.uniform(0.0, 1.0, size=(8, 8))
            sparse = _prune(s, FeedbackConfig(p=0.01))
            assert np.all(sparse.keep_counts() >= 1)

    def test_keep_set_monotone_in_p(self, rng):
        s = rng.uniform(0.0, 1.0, size=(10, 12))
        previous = None
        for p in np.arange(0.1, 1.01, 0.1):
            kept = ~_prune(s, FeedbackConfig(p=float(p))).suppressed
            if previous is not None:
                assert np.all(previous <= kept)  # superset of the tighter cutoff
            previous = kept

    def test_scaling_preserves_within_row_ranking(self, rng):
        s = rng.uniform(0.0, 1.0, size=(6, 9))
        baseline = None
        for lam in (0.0, 1.0, 2.0, 4.0):
            sparse = _prune(s, FeedbackConfig(lam=lam, p=0.7))
            ranking = np.argsort(-np.where(sparse.suppressed, -np.inf, sparse.values),
                                 axis=1, kind="stable")
            if baseline is not None:
                np.testing.assert_array_equal(ranking, baseline)
                np.testing.assert_array_equal(sparse.suppressed, base_mask)
            baseline = ranking
            base_mask = sparse.suppressed

    def test_scaling_amplifies_kept_values(self, rng):
        s = rng.uniform(0.1, 1.0, size=(4, 4))
        scaled = _prune(s, FeedbackConfig(pruning_mode="none", scaling=True, lam=2.0))
        np.testing.assert_allclose(scaled.values, s * np.exp(2.0 * s), atol=1e-12)


class TestFeedbackAttention:
    def test_single_survivor_rows_are_one_hot(self):
        s = np.array([[1.0, 0.5], [0.3, 0.9]])
        sparse = _prune(s, FeedbackConfig(p=1e-9))
        fb = feedback_attention(sparse)
        assert np.all(np.sort(fb, axis=1)[:, -1] == 1.0)
        assert np.all(fb[sparse.suppressed] == 0.0)

    def test_two_equal_survivors_split_evenly(self):
        from fsattn import MaskedMatrix

        sparse = MaskedMatrix(np.array([[2.0, 2.0, 0.0]]),
                              np.array([[False, False, True]]))
        np.testing.assert_allclose(feedback_attention(sparse), [[0.5, 0.5, 0.0]],
                                   atol=1e-12)

    def test_worked_example_values(self):
        from fsattn import MaskedMatrix

        survivors = [1.0 * math.exp(2.0), 0.5 * math.exp(1.0)]
        sparse = MaskedMatrix(np.array([[survivors[0], survivors[1], 0.0]]),
                              np.array([[False, False, True]]))
        fb = feedback_attention(sparse)
        expected = softmax_scalar(survivors)
        np.testing.assert_allclose(fb[0, :2], expected, atol=1e-12)
        # oracle value: [0.9975995, 0.0024005]
        np.testing.assert_allclose(fb[0, :2], [0.9976, 0.0024], atol=1e-5)

    def test_rows_sum_to_one(self, rng):
        s = rng.uniform(0.0, 1.0, size=(12, 12))
        fb = feedback_attention(_prune(s, FeedbackConfig()))
        np.testing.assert_allclose(fb.sum(axis=1), 1.0, atol=1e-9)


class TestAdaptAttention:
    def test_identity_everywhere(self):
        eye = np.eye(3)
        for strategy in ("refine", "precondition", "replace", "ensemble"):
            np.testing.assert_allclose(adapt_attention(eye, eye, strategy), eye,
                                       atol=1e-12)

    def test_identity_feedback(self, rng):
        attn = random_stochastic(rng, 4)
        eye = np.eye(4)
        np.testing.assert_allclose(adapt_attention(attn, eye, "refine"), attn, atol=1e-12)
        np.testing.assert_allclose(adapt_attention(attn, eye, "precondition"), attn,
                                   atol=1e-12)
        np.testing.assert_allclose(adapt_attention(attn, eye, "ensemble"),
                                   (2.0 * attn + eye) / 3.0, atol=1e-12)

    def test_hand_computed_ensemble(self):
        attn = np.array([[0.7, 0.3], [0.4, 0.6]])
        fb = np.eye(2)
        out = adapt_attention(attn, fb, "ensemble")
        np.testing.assert_allclose(out, [[0.8, 0.2], [0.8 / 3.0, 2.2 / 3.0]], atol=1e-12)
        np.testing.assert_allclose(out, [[0.8, 0.2], [0.2667, 0.7333]], atol=5e-5)

    def test_replace_returns_feedback(self, rng):
        attn = random_stochastic(rng, 5)
        fb = random_stochastic(rng, 5)
        np.testing.assert_array_equal(adapt_attention(attn, fb, "replace"), fb)

    def test_outputs_row_stochastic(self, rng):
        for _ in range(25):
            n = int(rng.integers(2, 32))
            attn = random_stochastic(rng, n)
            fb = random_stochastic(rng, n)
            for strategy in ("refine", "precondition", "replace", "ensemble"):
                out = adapt_attention(attn, fb, strategy)
                np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
                assert np.all(out >= 0.0)

    def test_rejects_non_stochastic(self, rng):
        with pytest.raises(ValidationError):
            adapt_attention(np.ones((2, 2)), np.eye(2), "refine")

    def test_unknown_strategy(self, rng):
        attn = random_stochastic(rng, 2)
        with pytest.raises(ConfigError):
            adapt_attention(attn, attn, "blend")


class TestFeedbackConfig:
    @pytest.mark.parametrize("kwargs", [
        {"lam": -1.0}, {"p": 0.0}, {"p": 1.5},
        {"similarity_metric": "l2"}, {"pruning_mode": "topk"},
        {"ratio": 0.0}, {"ratio": 1.5}, {"threshold": -0.1},
        {"strategy": "mix"}, {"iterations": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            FeedbackConfig(**kwargs)

    def test_defaults(self):
        config = FeedbackConfig()
        assert config.lam == 2.0
        assert config.p == 0.45
        assert config.similarity_metric == "kl"
        assert config.pruning_mode == "confidence"
        assert config.scaling
        assert config.strategy == "ensemble"
        assert config.iterations == 1


class TestSimilarityState:
    def test_invariants_on_random_input(self, rng):
        rows = random_distributions(rng, 16, 6)
        state = build_similarity_state(rows, FeedbackConfig())
        assert np.all(state.divergence >= 0.0)
        assert np.all(np.diagonal(state.divergence) == 0.0)
        assert np.all(state.similarity > 0.0) and np.all(state.similarity <= 1.0)
        assert np.all(np.diagonal(state.similarity) == 1.0)
        last = state.cum_conf[np.arange(16), state.order[:, -1]]
        np.testing.assert_allclose(last, 1.0, atol=1e-6)
        assert np.all(state.sparse.keep_counts() >= 1)

    def test_diagonal_is_row_max_for_distinct_rows(self, rng):
        rows = random_distributions(rng, 10, 8)
        state = build_similarity_state(rows, FeedbackConfig())
        assert np.all(np.argmax(state.similarity, axis=1) == np.arange(10))

    def test_cosine_metric_skips_divergence(self, rng):
        rows = random_distributions(rng, 5, 4)
        state = build_similarity_state(rows, FeedbackConfig(similarity_metric="cosine"))
        assert state.divergence is None
        assert np.all(state.similarity >= 0.0) and np.all(state.similarity <= 1.0)


class TestPipeline:
    def _bare_setup(self, rng, n=6, v=4, c=3):
        tokens = rng.standard_normal((n, v))
        weights = HeadWeights.bare(v)
        text = rng.standard_normal((c, v))
        return tokens, weights, text

    def test_isolation_null_uniform_attention(self, rng):
        tokens, weights, text = self._bare_setup(rng)
        config = AttentionConfig(mode="external", external_attention=uniform_attention(6))
        fb_config = FeedbackConfig(strategy="replace", pruning_mode="none", scaling=False)
        result = fsa_pipeline(tokens, weights, text, config, fb_config)
        assert np.all(result.state.divergence == 0.0)
        assert np.all(result.state.similarity == 1.0)
        np.testing.assert_allclose(result.feedback, 1.0 / 6.0, atol=1e-12)
        np.testing.assert_allclose(result.attn_adapted, 1.0 / 6.0, atol=1e-12)
        # adapted context is the column mean of V, identically for every patch
        mean_row = tokens.mean(axis=0)
        expected = np.tile(mean_row, (6, 1))
        np.testing.assert_allclose(
            result.logits_adapted,
            fsa_pipeline(expected, weights, text, config, fb_config).logits_init,
            atol=1e-12,
        )

    def test_single_iteration_equals_manual_composition(self, rng):
        from fsattn import (
            dense_logits,
            head_forward,
            initial_attention,
            qkv_project,
            segment,
        )

        tokens, weights, text = self._bare_setup(rng)
        fb_config = FeedbackConfig()
        attn_config = AttentionConfig(mode="qk")
        result = fsa_pipeline(tokens, weights, text, attn_config, fb_config)

        q, k, v = qkv_project(tokens, weights)
        attn = initial_attention(q, k, v, attn_config, weights.tau)
        logits = dense_logits(head_forward(attn, tokens, weights), text)
        logits_uni = dense_logits(
            head_forward(uniform_attention(6), tokens, weights), text)
        isolated = isolate_logits(logits, logits_uni)
        state = build_similarity_state(isolated, fb_config)
        fb = feedback_attention(state.sparse)
        adapted = adapt_attention(attn, fb, fb_config.strategy)
        logits_adapted = dense_logits(head_forward(adapted, tokens, weights), text)

        np.testing.assert_array_equal(result.attn_init, attn)
        np.testing.assert_array_equal(result.feedback, fb)
        np.testing.assert_array_equal(result.attn_adapted, adapted)
        np.testing.assert_array_equal(result.logits_adapted, logits_adapted)
        np.testing.assert_array_equal(result.seg_adapted, segment(logits_adapted))

    def test_two_iterations_chain_adaptation(self, rng):
        tokens, weights, text = self._bare_setup(rng)
        attn_config = AttentionConfig(mode="qk")
        one = fsa_pipeline(tokens, weights, text, attn_config,
                           FeedbackConfig(iterations=1))
        two = fsa_pipeline(tokens, weights, text, attn_config,
                           FeedbackConfig(iterations=2))
        assert two.diagnostics.iterations == 2
        np.testing.assert_array_equal(one.attn_init, two.attn_init)
        # second pass starts from the first pass's adapted attention
        assert not np.array_equal(one.attn_adapted, two.attn_adapted)

    def test_single_patch_degenerates_gracefully(self, rng):
        tokens = rng.standard_normal((1, 3))
        result = fsa_pipeline(tokens, HeadWeights.bare(3), rng.standard_normal((3, 3)),
                              AttentionConfig(mode="qk"), FeedbackConfig())
        np.testing.assert_array_equal(result.attn_adapted, [[1.0]])

    def test_keep_counts_reported(self, rng):
        tokens, weights, text = self._bare_setup(rng)
        result = fsa_pipeline(tokens, weights, text, AttentionConfig(mode="qk"),
                              FeedbackConfig())
        assert result.diagnostics.keep_counts.shape == (6,)
        assert np.all(result.diagnostics.keep_counts >= 1)
        assert "total" in result.diagnostics.timings_ms
