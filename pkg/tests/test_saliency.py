import math

import numpy as np
import pytest

from focalcvae.attention import multi_head_attention
from focalcvae.counters import FlopCounter
from focalcvae.errors import ConfigurationError, DimensionError, UsageError
from focalcvae.gradcheck import gradcheck
from focalcvae.rng import Rng
from focalcvae.saliency import (
    SaliencyAttention,
    SaliencyConfig,
    SaliencyDecoder,
    SaliencyEncoder,
    saliency_attention,
    saliency_measure,
    select_top_u,
)
from focalcvae.tensor import Tensor


def brute_force(q, k, v, u):
    """Loop-based reference: peaked rows get softmax, the rest the mean value."""
    lq, d = q.shape
    scores = q @ k.T / math.sqrt(d)
    measure = [row.max() - row.mean() for row in scores]
    chosen = sorted(sorted(range(lq), key=lambda i: (-measure[i], i))[:u])
    out = np.tile(v.mean(axis=0), (lq, 1))
    for i in chosen:
        w = np.exp(scores[i] - scores[i].max())
        out[i] = (w / w.sum()) @ v
    return out, chosen


class TestConfig:
    @pytest.mark.parametrize(
        "lq,expected",
        [(600, 32), (1, 1), (12, 12), (100, 24)],
    )
    def test_logarithmic_budget(self, lq, expected):
        assert SaliencyConfig(u_factor=5.0).resolve_u(lq) == expected

    @pytest.mark.parametrize("lq,expected", [(10, 7), (12, 8)])
    def test_default_budget_is_sparse_at_policy_lengths(self, lq, expected):
        # decoder queries (chunk 10) and encoder tokens (aggregate, proprio, 10 actions)
        u = SaliencyConfig().resolve_u(lq)
        assert u == expected
        assert u < lq

    def test_fixed_and_dense(self):
        assert SaliencyConfig(u_fixed=3).resolve_u(50) == 3
        assert SaliencyConfig(u_fixed=80).resolve_u(50) == 50
        assert SaliencyConfig(dense=True).resolve_u(50) == 50

    def test_key_samples_capped_by_keys(self):
        assert SaliencyConfig().key_samples(600, 10) == 10
        assert SaliencyConfig().key_samples(600, 600) == 32

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            SaliencyConfig(blocks=0)
        with pytest.raises(ConfigurationError):
            SaliencyConfig(u_factor=0.0)


class TestMeasureAndSelection:
    def test_worked_example(self):
        m = saliency_measure(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[2.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(m, [math.sqrt(2) / 2, 0.0], atol=1e-12)

    def test_matches_loop_over_random_instances(self, f64):
        root = Rng(77)
        for i in range(100):
            rng = root.fork(i)
            lq, lk, d = (int(n) for n in rng.integers(1, 17, 3))
            q, k = rng.normal((lq, d)), rng.normal((lk, d))
            expected = []
            for row in q:
                scores = [float(row @ key) / math.sqrt(d) for key in k]
                expected.append(max(scores) - sum(scores) / lk)
            np.testing.assert_allclose(saliency_measure(q, k), expected, rtol=0, atol=1e-12)

    def test_masked_keys_ignored(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[2.0, 0.0], [0.0, 0.0], [50.0, 0.0]])
        masked = saliency_measure(q, k, key_mask=np.array([True, True, False]))
        np.testing.assert_allclose(masked, saliency_measure(q, k[:2]))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            saliency_measure(np.ones((2, 3)), np.ones((2, 4)))

    def test_ties_go_to_lower_index(self):
        np.testing.assert_array_equal(select_top_u(np.array([0.7, 0.0, 0.7, 0.1]), 2), [0, 2])
        np.testing.assert_array_equal(select_top_u(np.array([0.1, 0.5, 0.5, 0.5]), 2), [1, 2])

    def test_indices_are_sorted(self):
        np.testing.assert_array_equal(select_top_u(np.array([0.1, 0.9, 0.3, 0.8]), 3), [1, 2, 3])

    @pytest.mark.parametrize("alpha", [0.25, 0.5, 2.0, 7.0])
    def test_selection_invariant_to_joint_scaling(self, f64, alpha):
        root = Rng(31)
        for i in range(20):
            rng = root.fork(i)
            q, k = rng.normal((12, 4)), rng.normal((9, 4))
            base = select_top_u(saliency_measure(q, k), 5)
            scaled = select_top_u(saliency_measure(alpha * q, alpha * k), 5)
            np.testing.assert_array_equal(scaled, base)

    @pytest.mark.parametrize("u", [0, 5])
    def test_u_out_of_range(self, u):
        with pytest.raises(UsageError):
            select_top_u(np.zeros(4), u)


class TestSaliencyAttention:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, f64, seed):
        rng = Rng(seed)
        q, k, v = rng.normal((9, 4)), rng.normal((7, 4)), rng.normal((7, 3))
        out, idx = saliency_attention(Tensor(q), Tensor(k), Tensor(v), 3)
        expected, chosen = brute_force(q, k, v, 3)
        np.testing.assert_array_equal(idx, chosen)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)

    def test_full_budget_equals_dense(self, f64, randn):
        q, k, v = randn(6, 4), randn(8, 4), randn(8, 4)
        out, idx = saliency_attention(q, k, v, 6)
        dense, _ = multi_head_attention(q, k, v, heads=1)
        np.testing.assert_allclose(out.data, dense.data, atol=1e-10)
        np.testing.assert_array_equal(idx, np.arange(6))

    def test_unselected_rows_get_mean_value(self, f64, randn):
        q, k, v = randn(8, 4), randn(5, 4), randn(5, 2)
        out, idx = saliency_attention(q, k, v, 2)
        rest = np.setdiff1d(np.arange(8), idx)
        np.testing.assert_allclose(out.data[rest], np.tile(v.data.mean(axis=0), (6, 1)), atol=1e-12)

    def test_key_mask_mean_over_valid_keys(self, f64, randn):
        q, k, v = randn(4, 4), randn(5, 4), randn(5, 2)
        mask = np.array([True, True, True, False, False])
        out, idx = saliency_attention(q, k, v, 1, key_mask=mask)
        reference, ref_idx = saliency_attention(q, k[:3], v[:3], 1)
        np.testing.assert_array_equal(idx, ref_idx)
        np.testing.assert_allclose(out.data, reference.data, atol=1e-12)

    def test_gradient(self, f64, randn):
        q, k, v = randn(5, 4), randn(6, 4), randn(6, 3)
        assert gradcheck(lambda: (saliency_attention(q, k, v, 2)[0] ** 2).sum(), [q, k, v])


class TestSaliencyLayer:
    def test_full_budget_layer_equals_dense_layer(self, f64, randn):
        x = randn(7, 8)
        sparse = SaliencyAttention(Rng(5), 8, 2, SaliencyConfig(u_fixed=7))
        dense = SaliencyAttention(Rng(5), 8, 2, SaliencyConfig(dense=True))
        np.testing.assert_allclose(sparse(x, x)[0].data, dense(x, x)[0].data, atol=1e-10)

    def test_trace_weights_rows_sum_to_one(self, randn, rng):
        layer = SaliencyAttention(rng, 8, 2, SaliencyConfig(u_fixed=2))
        out, trace = layer(randn(6, 8), randn(4, 8))
        assert out.shape == (6, 8)
        assert trace.weights.shape == (2, 6, 4)
        assert trace.selected.shape == (2, 2)
        np.testing.assert_allclose(trace.weights.sum(axis=-1), 1.0, rtol=1e-5)

    def test_key_sampling_runs_and_counts(self, rng, randn):
        layer = SaliencyAttention(rng, 8, 2, SaliencyConfig(u_fixed=3, key_sampling=True, sample_factor=1.0))
        with FlopCounter() as counter:
            out, trace = layer(randn(20, 8), randn(20, 8))
        assert out.shape == (20, 8)
        assert trace.selected.shape == (2, 3)
        n = SaliencyConfig(sample_factor=1.0).key_samples(20, 20)
        sampled = 2 * 2 * 20 * n * 4
        rescore = 2 * 2 * 3 * 20 * 4
        context = 2 * 2 * 3 * 20 * 4
        assert counter.by_scope()["attention"] == sampled + rescore + context + 5 * 2 * 3 * 20

    def test_key_sampling_is_repeatable(self, randn):
        cfg = SaliencyConfig(u_fixed=3, key_sampling=True, sample_factor=1.0)
        layer = SaliencyAttention(Rng(8), 8, 2, cfg)
        x = randn(20, 8)
        first, trace_a = layer(x, x)
        second, trace_b = layer(x, x)
        rebuilt, trace_c = SaliencyAttention(Rng(8), 8, 2, cfg)(x, x)
        np.testing.assert_array_equal(first.data, second.data)
        np.testing.assert_array_equal(first.data, rebuilt.data)
        np.testing.assert_array_equal(trace_a.selected, trace_b.selected)
        np.testing.assert_array_equal(trace_a.selected, trace_c.selected)

    def test_sparse_attention_counts_fewer_flops(self, randn, rng):
        x = randn(60, 8)
        sparse = SaliencyAttention(rng, 8, 2, SaliencyConfig())
        dense = SaliencyAttention(rng, 8, 2, SaliencyConfig(dense=True))
        with FlopCounter() as a:
            sparse(x, x)
        with FlopCounter() as b:
            dense(x, x)
        assert a.total(scope="attention") < b.total(scope="attention")


class TestEncoderDecoder:
    def test_padding_does_not_change_summary(self, f64, randn, rng):
        encoder = SaliencyEncoder(rng, 8, 2, 16, SaliencyConfig(u_fixed=2))
        tokens = randn(5, 8)
        padded = Tensor(np.concatenate([tokens.data, rng.normal((3, 8)) * 10.0]))
        mask = np.array([True] * 5 + [False] * 3)
        plain, _ = encoder(tokens)
        masked, _ = encoder(padded, mask)
        assert plain.shape == (8,)
        np.testing.assert_allclose(masked.data, plain.data, atol=1e-10)

    def test_masked_aggregation_token(self, randn, rng):
        encoder = SaliencyEncoder(rng, 8, 2, 16, SaliencyConfig())
        with pytest.raises(UsageError):
            encoder(randn(3, 8), np.array([False, True, True]))

    def test_encoder_rejects_wrong_width(self, randn, rng):
        with pytest.raises(DimensionError):
            SaliencyEncoder(rng, 8, 2, 16, SaliencyConfig())(randn(3, 6))

    def test_decoder_shapes(self, randn, rng):
        decoder = SaliencyDecoder(rng, 8, 2, 16, 6, SaliencyConfig(blocks=3))
        actions, traces = decoder(randn(5, 8), 10)
        assert actions.shape == (10, 6)
        assert len(traces) == 3
        assert traces[0].weights.shape == (2, 10, 5)

    def test_stack_gradient(self, f64, randn, rng):
        encoder = SaliencyEncoder(rng.fork(0), 4, 2, 8, SaliencyConfig(u_fixed=2, blocks=1), "tanh")
        decoder = SaliencyDecoder(rng.fork(1), 4, 2, 8, 2, SaliencyConfig(u_fixed=2, blocks=1), "tanh")
        tokens = randn(4, 4)

        def loss():
            summary, _ = encoder(tokens)
            actions, _ = decoder(summary.reshape(1, 4), 3)
            return (actions * actions).sum()

        assert gradcheck(loss, [tokens] + encoder.parameters() + decoder.parameters(), tol=1e-4)
