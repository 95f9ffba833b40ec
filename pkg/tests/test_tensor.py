import numpy as np
import pytest

from focalcvae.counters import FlopCounter, flop_scope
from focalcvae.errors import DimensionError, NumericalError, UsageError
from focalcvae.gradcheck import gradcheck
from focalcvae.tensor import Tensor, concat, no_grad, set_debug, stack


class TestArithmetic:
    def test_broadcast_add_mul_gradients(self, f64, randn):
        a, b = randn(3, 4), randn(4)
        assert gradcheck(lambda: ((a + b) * a - b / (a * a + 2.0)).sum(), [a, b])

    def test_pow_exp_log_tanh(self, f64, randn):
        a = randn(5)
        assert gradcheck(lambda: ((a * a + 1.0).log() + a.tanh() + (a * 0.5).exp() + (a * a + 1.0) ** 1.5).sum(), [a])

    def test_relu_and_clip_away_from_kinks(self, f64):
        a = Tensor(np.array([-1.3, -0.2, 0.4, 2.5]), requires_grad=True)
        assert gradcheck(lambda: (a.relu() * 3.0 + a.clip(-1.0, 1.0)).sum(), [a])

    def test_reverse_operands(self, f64):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = (2.0 - a) + (6.0 / a)
        np.testing.assert_allclose(out.data, [1.0 + 6.0, 0.0 + 3.0])


class TestMatMul:
    def test_gradient_batched(self, f64, randn):
        a, b = randn(2, 3, 4), randn(4, 5)
        assert gradcheck(lambda: (a @ b).sum(), [a, b])

    def test_inner_mismatch_names_shapes(self, randn):
        with pytest.raises(DimensionError, match=r"\(2, 3\) vs \(4, 5\)"):
            randn(2, 3) @ randn(4, 5)

    def test_counts_two_flops_per_mac(self, randn):
        a, b = randn(2, 3), randn(3, 4)
        with FlopCounter() as counter:
            with flop_scope("attention"):
                a @ b
        assert counter.total() == 2 * 2 * 3 * 4
        assert counter.by_scope() == {"attention": 48}


class TestIndexingAndShapes:
    def test_fancy_index_gradient_accumulates(self, f64, randn):
        a = randn(4, 3)
        rows = np.array([0, 2, 2])
        assert gradcheck(lambda: (a[rows] * a[rows]).sum(), [a])

    def test_reshape_transpose_sum_mean(self, f64, randn):
        a = randn(2, 3, 4)
        assert gradcheck(lambda: a.transpose(2, 0, 1).reshape(4, 6).mean(axis=1).sum() + a.swapaxes(0, 2).sum(axis=(0, 1)).sum(), [a])

    def test_concat_and_stack(self, f64, randn):
        a, b = randn(2, 3), randn(1, 3)
        joined = concat([a, b], axis=0)
        assert joined.shape == (3, 3)
        assert stack([a, a], axis=1).shape == (2, 2, 3)
        assert gradcheck(lambda: (concat([a, b], axis=0) ** 2).sum(), [a, b])

    def test_bad_reshape(self, randn):
        with pytest.raises(DimensionError):
            randn(2, 3).reshape(4, 2)


class TestBackward:
    def test_non_scalar_loss_is_usage_error(self, randn):
        with pytest.raises(UsageError):
            randn(3).backward()

    def test_repeated_backward_accumulates(self, f64):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = (a * a).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(a.grad, [4.0, 8.0])

    def test_shared_subexpression(self, f64):
        a = Tensor(np.array(3.0), requires_grad=True)
        b = a * a
        (b + b).backward()
        assert a.grad == pytest.approx(12.0)

    def test_non_finite_loss(self):
        a = Tensor(np.array([np.inf]), requires_grad=True)
        with pytest.raises(NumericalError):
            (a * 1.0).sum().backward()

    def test_no_grad_records_nothing(self, randn):
        a = randn(2)
        with no_grad():
            b = a * 2.0
        assert not b.requires_grad and b.creator is None

    def test_debug_mode_catches_nan(self):
        a = Tensor(np.array([-1.0]), requires_grad=True)
        set_debug(True)
        try:
            with pytest.raises(NumericalError, match="Log"):
                a.log()
        finally:
            set_debug(False)


class TestDtype:
    def test_default_is_float32(self, randn):
        assert randn(2).dtype == np.float32

    def test_f64_context(self, f64, randn):
        assert randn(2).dtype == np.float64
