import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csranet.csra import (
    INF,
    AttentionHeadConfig,
    CSRAHead,
    attended_features,
    class_score_map,
    csra_single_head,
    default_heads,
    fuse_heads,
    predict_labels,
    spatial_attention,
)
from csranet.tensor import Tensor, grad_check

from .oracles import brute_softmax

seeds = st.integers(0, 2**32 - 1)


def random_instance(seed, c=3, d=5, h=3, w=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(d, h, w)), rng.normal(size=(c, d)), rng.normal(size=c)


def gap_logits(x, m, b):
    return m @ x.reshape(x.shape[0], -1).mean(axis=1) + b


class TestScoreMap:
    def test_zero_classifier(self):
        x, _, _ = random_instance(0)
        assert not class_score_map(x, np.zeros((3, 5))).data.any()

    def test_single_location_is_linear_map(self):
        rng = np.random.default_rng(1)
        x, m = rng.normal(size=(4, 1, 1)), rng.normal(size=(2, 4))
        np.testing.assert_allclose(class_score_map(x, m).data[:, 0, 0], m @ x[:, 0, 0], atol=1e-14)

    def test_hand_example(self):
        x = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])  # d=2, 1x2 grid with columns (1,0), (0,1)
        s = class_score_map(x, np.array([[2.0, 3.0]])).data
        np.testing.assert_array_equal(s[0], [[2.0, 3.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="d=5"):
            class_score_map(np.zeros((5, 2, 2)), np.zeros((3, 4)))


class TestSpatialAttention:
    def test_constant_scores_uniform(self):
        att = spatial_attention(np.full((2, 3, 3), 0.7), 2.0).data
        np.testing.assert_allclose(att, 1.0 / 9.0, atol=1e-15)

    def test_infinite_temperature_one_hot(self):
        s = np.array([[0.1, 0.9], [0.3, -2.0]])
        np.testing.assert_array_equal(spatial_attention(s, INF).data, [[0.0, 1.0], [0.0, 0.0]])

    def test_infinite_temperature_tie_breaks_to_first(self):
        s = np.array([[1.0, 2.0], [2.0, 0.0]])
        np.testing.assert_array_equal(spatial_attention(s, INF).data, [[0.0, 1.0], [0.0, 0.0]])

    def test_ln3_example(self):
        att = spatial_attention(np.array([[0.0, math.log(3.0)]]), 1.0).data
        np.testing.assert_allclose(att, [[0.25, 0.75]], atol=1e-15)

    def test_matches_brute_softmax_and_is_stable(self):
        s = np.array([[800.0, 799.0, 790.0], [-5.0, 0.0, 3.0]])
        att = spatial_attention(s, 2.0).data
        np.testing.assert_allclose(att.ravel(), brute_softmax(list(s.ravel()), 2.0), atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.sampled_from([0.5, 1.0, 2.0, 4.0, INF]))
    def test_weights_are_a_distribution(self, seed, t):
        x, m, _ = random_instance(seed)
        att = spatial_attention(class_score_map(x, m), t).data
        assert np.all(att >= 0)
        np.testing.assert_allclose(att.sum(axis=(1, 2)), 1.0, atol=1e-12)


class TestHeadConfig:
    @pytest.mark.parametrize("t,lam", [(0.0, 0.1), (-1.0, 0.1), (1.0, -0.5), (float("nan"), 0.1)])
    def test_rejects_invalid(self, t, lam):
        with pytest.raises(ValueError):
            AttentionHeadConfig(t, lam)

    def test_round_trip(self):
        for h in default_heads():
            assert AttentionHeadConfig.from_dict(h.to_dict()) == h


class TestSingleHead:
    @settings(max_examples=30, deadline=None)
    @given(seeds, st.sampled_from([1.0, 3.0, INF]))
    def test_lambda_zero_is_gap_classifier(self, seed, t):
        x, m, b = random_instance(seed)
        logits = csra_single_head(x, m, AttentionHeadConfig(t, 0.0), b).data
        np.testing.assert_allclose(logits, gap_logits(x, m, b), atol=1e-9)

    def test_spatially_constant_features(self):
        rng = np.random.default_rng(3)
        v, m, b = rng.normal(size=6), rng.normal(size=(2, 6)), rng.normal(size=2)
        x = np.broadcast_to(v[:, None, None], (6, 3, 3)).copy()
        for t in (0.5, 2.0, INF):
            logits = csra_single_head(x, m, AttentionHeadConfig(t, 0.3), b).data
            np.testing.assert_allclose(logits, 1.3 * (m @ v) + b, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_infinite_head_uses_best_location(self, seed):
        x, m, _ = random_instance(seed)
        flat = x.reshape(x.shape[0], -1)
        best = [max(float(m[i] @ flat[:, k]) for k in range(flat.shape[1])) for i in range(m.shape[0])]
        logits = csra_single_head(x, m, AttentionHeadConfig(INF, 1.0)).data
        np.testing.assert_allclose(logits, gap_logits(x, m, 0.0) + best, atol=1e-12)

    def test_matches_explicit_residual_feature_formula(self):
        x, m, b = random_instance(11)
        head = AttentionHeadConfig(2.0, 0.4)
        g = x.reshape(5, -1).mean(axis=1)
        a = attended_features(x, m, head)
        expected = np.array([m[i] @ (g + 0.4 * a[i]) for i in range(3)]) + b
        np.testing.assert_allclose(csra_single_head(x, m, head, b).data, expected, atol=1e-12)

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(5)
        xs, m = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(2, 4))
        head = AttentionHeadConfig(1.0, 0.2)
        batched = csra_single_head(xs, m, head).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], csra_single_head(xs[i], m, head).data, atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_spatial_permutation_invariance(self, seed):
        x, m, b = random_instance(seed)
        perm = np.random.default_rng(seed).permutation(12)
        xp = x.reshape(5, 12)[:, perm].reshape(x.shape)
        heads = default_heads(0.5)
        np.testing.assert_allclose(fuse_heads(x, m, heads, b).data, fuse_heads(xp, m, heads, b).data, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_class_equivariance(self, seed):
        x, m, b = random_instance(seed)
        perm = np.random.default_rng(seed + 1).permutation(3)
        heads = default_heads()
        np.testing.assert_allclose(fuse_heads(x, m[perm], heads, b[perm]).data, fuse_heads(x, m, heads, b).data[perm], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seeds, st.floats(0.05, 10.0), st.floats(0.05, 10.0))
    def test_attended_score_non_decreasing_in_temperature(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        x, m, _ = random_instance(seed)
        s = class_score_map(x, m).data.reshape(3, -1)

        def attended(t):
            return (spatial_attention(class_score_map(x, m), t).data.reshape(3, -1) * s).sum(axis=1)

        assert np.all(attended(hi) >= attended(lo) - 1e-12)
        assert np.all(attended(INF) >= attended(hi) - 1e-12)


class TestFusion:
    def test_single_head_identity(self):
        x, m, b = random_instance(7)
        head = AttentionHeadConfig(2.0, 0.3)
        np.testing.assert_array_equal(fuse_heads(x, m, [head], b).data, csra_single_head(x, m, head, b).data)

    def test_duplicate_heads_idempotent(self):
        x, m, b = random_instance(8)
        head = AttentionHeadConfig(2.0, 0.3)
        np.testing.assert_allclose(fuse_heads(x, m, [head, head], b).data, csra_single_head(x, m, head, b).data, atol=1e-14)

    def test_lambda_zero_makes_temperature_irrelevant(self):
        x, m, b = random_instance(9)
        heads = [AttentionHeadConfig(1.0, 0.0), AttentionHeadConfig(INF, 0.0)]
        np.testing.assert_allclose(fuse_heads(x, m, heads, b).data, gap_logits(x, m, b), atol=1e-12)

    def test_mean_of_heads(self):
        x, m, b = random_instance(10)
        heads = default_heads(0.2)
        each = np.mean([csra_single_head(x, m, h).data for h in heads], axis=0)
        np.testing.assert_allclose(fuse_heads(x, m, heads, b).data, each + b, atol=1e-12)

    def test_empty_heads_rejected(self):
        x, m, _ = random_instance(0)
        with pytest.raises(ValueError):
            fuse_heads(x, m, [])


class TestPredictLabels:
    def test_zero_logits_inclusive_boundary(self):
        p, y = predict_labels(np.zeros(4), 0.5)
        np.testing.assert_array_equal(p, 0.5)
        np.testing.assert_array_equal(y, 1)

    def test_hand_example(self):
        logits = np.log(np.array([0.6, 0.4, 0.5]) / (1 - np.array([0.6, 0.4, 0.5])))
        _, y = predict_labels(logits, 0.5)
        np.testing.assert_array_equal(y, [1, 0, 1])

    def test_extreme_thresholds(self):
        # |z| <= 30 keeps sigmoid strictly inside (0, 1) in float64
        z = np.clip(np.random.default_rng(0).normal(scale=20, size=50), -30, 30)
        assert predict_labels(z, 0.0)[1].all()
        assert not predict_labels(z, 1.0)[1].any()

    def test_probabilities_strictly_inside_unit_interval(self):
        p, _ = predict_labels(np.linspace(-30, 30, 61))
        assert np.all((p > 0) & (p < 1))

    def test_rejects_threshold_outside_unit_interval(self):
        with pytest.raises(ValueError):
            predict_labels(np.zeros(2), 1.5)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(0, 1), st.floats(0, 1))
    def test_antitone_in_threshold(self, logits, t1, t2):
        lo, hi = sorted((t1, t2))
        assert np.all(predict_labels(logits, hi)[1] <= predict_labels(logits, lo)[1])


def test_head_gradients():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 6, 3, 3)), requires_grad=True)
    head = CSRAHead(4, 6, default_heads(0.5), seed=1)
    w = rng.normal(size=(2, 4))
    params = [x, head.classifier, head.bias]
    report = grad_check(lambda: (head(x) * w).sum(), params, n_samples=80)
    assert report.passed, report.summary()
