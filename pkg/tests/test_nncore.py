import math

import numpy as np
import pytest

from revise_lab.autodiff import Tensor, dtype_scope
from revise_lab.nncore import (
    OptimizerState,
    ParamTensor,
    adamw_step,
    attention,
    cosine_lr,
    cross_entropy,
    grad_check,
    layer_norm,
    linear,
    zero_grads,
)


def t32(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


class TestLinear:
    def test_identity_weight(self):
        w = ParamTensor("w", np.eye(2, dtype=np.float32))
        b = ParamTensor("b", np.zeros(2, dtype=np.float32))
        out = linear(t32([[1.0, 2.0]]), w, b)
        assert np.allclose(out.data, [[1.0, 2.0]])

    def test_hand_product(self):
        w = ParamTensor("w", np.array([[2.0], [3.0]], dtype=np.float32))
        b = ParamTensor("b", np.array([1.0], dtype=np.float32))
        out = linear(t32([[1.0, 1.0]]), w, b)
        assert np.allclose(out.data, [[6.0]])

    def test_zero_input_passes_bias(self):
        w = ParamTensor("w", np.ones((2, 2), dtype=np.float32))
        b = ParamTensor("b", np.array([5.0, 5.0], dtype=np.float32))
        out = linear(t32([[0.0, 0.0]]), w, b)
        assert np.allclose(out.data, [[5.0, 5.0]])

    def test_shape_mismatch_names_both(self):
        w = ParamTensor("proj", np.ones((3, 2), dtype=np.float32))
        b = ParamTensor("b", np.zeros(2, dtype=np.float32))
        with pytest.raises(ValueError, match=r"\(1, 2\).*proj.*\(3, 2\)"):
            linear(t32([[1.0, 2.0]]), w, b)


class TestAttention:
    def test_single_key_weights_one(self):
        rng = np.random.default_rng(0)
        q = t32(rng.normal(size=(3, 4)))
        kv = t32(rng.normal(size=(1, 4)))
        out, w = attention(q, kv, kv, heads=2)
        assert np.allclose(w.data, 1.0)
        assert np.allclose(out.data, np.tile(kv.data, (3, 1)), atol=1e-6)

    def test_orthogonal_queries_uniform(self):
        q = t32(np.zeros((2, 4)))
        k = t32(np.random.default_rng(1).normal(size=(4, 4)))
        v = t32(np.random.default_rng(2).normal(size=(4, 4)))
        _, w = attention(q, k, v, heads=2)
        assert np.allclose(w.data, 0.25, atol=1e-6)

    def test_hand_computed_single_head(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        k = np.array([[1.0, 1.0], [2.0, 0.0]], dtype=np.float32)
        v = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        out, w = attention(t32(q), t32(k), t32(v), heads=1)
        scores = q @ k.T / math.sqrt(2)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        wm = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(w.data[0], wm, atol=1e-6)
        assert np.allclose(out.data, wm @ v, atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        q, k, v = (t32(rng.normal(size=(5, 8))) for _ in range(3))
        _, w = attention(q, k, v, heads=4)
        assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-5)
        assert w.shape == (4, 5, 5)

    def test_indivisible_heads_raises(self):
        q = t32(np.zeros((2, 6)))
        with pytest.raises(ValueError, match="divisible"):
            attention(q, q, q, heads=4)


class TestLayerNorm:
    def gb(self, d, gain=1.0, bias=0.0):
        return (
            ParamTensor("g", np.full(d, gain, dtype=np.float32)),
            ParamTensor("b", np.full(d, bias, dtype=np.float32)),
        )

    def test_constant_row_collapses_to_bias(self):
        g, b = self.gb(3)
        out = layer_norm(t32([[3.0, 3.0, 3.0]]), g, b)
        assert np.allclose(out.data, 0.0, atol=1e-5)

    def test_already_normalized_row(self):
        g, b = self.gb(2)
        out = layer_norm(t32([[1.0, -1.0]]), g, b)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_zero_gain_gives_bias(self):
        g, b = self.gb(4, gain=0.0, bias=7.0)
        out = layer_norm(t32([[1.0, 2.0, 3.0, 4.0]]), g, b)
        assert np.allclose(out.data, 7.0)

    def test_rows_standardized(self):
        rng = np.random.default_rng(9)
        g, b = self.gb(16)
        out = layer_norm(t32(rng.normal(0, 3, size=(4, 16))), g, b).data
        assert np.allclose(out.mean(axis=1), 0.0, atol=1e-5)
        assert np.allclose(out.var(axis=1), 1.0, atol=1e-4)


class TestCrossEntropy:
    def test_uniform_two_way(self):
        loss = cross_entropy(t32([[0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_confident_tiny_loss(self):
        with dtype_scope(np.float64):
            loss = cross_entropy(Tensor(np.array([[10.0, -10.0]])), [0])
        # high-precision oracle: -log sigmoid(20)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)

    def test_ignored_position_contributes_nothing(self):
        loss = cross_entropy(t32([[0.0, 0.0], [99.0, -99.0]]), [0, -100], ignore_id=-100)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_all_ignored_raises(self):
        with pytest.raises(ValueError, match="empty loss"):
            cross_entropy(t32([[0.0, 0.0]]), [-100], ignore_id=-100)

    def test_gradient_is_softmax_minus_onehot(self):
        with dtype_scope(np.float64):
            logits = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
            cross_entropy(logits, [1]).backward()
            e = np.exp([1.0, 2.0, 3.0])
            sm = e / e.sum()
            sm[1] -= 1
            assert np.allclose(logits.grad, [sm], atol=1e-12)


class TestAdamW:
    def scalar_param(self, value, grad):
        p = ParamTensor("p", np.array([value], dtype=np.float32))
        p.tensor.grad = np.array([grad], dtype=np.float32)
        return p

    def test_zero_grad_no_decay_unchanged(self):
        p = self.scalar_param(1.5, 0.0)
        adamw_step([p], OptimizerState(lr=0.1))
        assert p.data[0] == pytest.approx(1.5)

    def test_frozen_param_bit_identical(self):
        p = ParamTensor("f", np.array([1.23456], dtype=np.float32), trainable=False)
        raw = p.data.tobytes()
        p.tensor.grad = np.array([9.9], dtype=np.float32)
        adamw_step([p], OptimizerState(lr=0.5))
        assert p.data.tobytes() == raw

    def test_hand_rolled_first_step(self):
        p = self.scalar_param(1.0, 1.0)
        adamw_step([p], OptimizerState(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0))
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_nan_grad_aborts_with_name(self):
        p = self.scalar_param(1.0, float("nan"))
        ok = self.scalar_param(2.0, 0.5)
        ok.name = "fine"
        p.name = "broken"
        state = OptimizerState(lr=0.1)
        with pytest.raises(RuntimeError, match="broken"):
            adamw_step([ok, p], state)
        # abort before mutating anything
        assert ok.data[0] == pytest.approx(2.0)
        assert state.step == 0

    def test_decoupled_weight_decay(self):
        p = self.scalar_param(1.0, 0.0)
        adamw_step([p], OptimizerState(lr=0.1, weight_decay=0.5))
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5)

    def test_step_counter_increments(self):
        p = self.scalar_param(1.0, 0.1)
        state = OptimizerState(lr=0.01)
        for expected in (1, 2, 3):
            p.tensor.grad = np.array([0.1], dtype=np.float32)
            adamw_step([p], state)
            assert state.step == expected


class TestCosineLr:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0)

    def test_midpoint_half(self):
        assert cosine_lr(50, 100, 2.0) == pytest.approx(1.0)

    def test_clamps_beyond_total(self):
        assert cosine_lr(150, 100, 1.0) == pytest.approx(0.0)


class TestGradCheck:
    def test_polynomial(self):
        with dtype_scope(np.float64):
            w = ParamTensor("w", np.array([3.0]))
            err = grad_check(lambda: (w.tensor * w.tensor).sum(), [w], eps=1e-4)
        assert err < 1e-6

    def test_frozen_param_trivially_zero(self):
        with dtype_scope(np.float64):
            w = ParamTensor("w", np.array([2.0]))
            frozen = ParamTensor("fr", np.array([5.0]), trainable=False)
            err = grad_check(lambda: (w.tensor * w.tensor * frozen.tensor).sum(), [w, frozen], eps=1e-4)
        assert err < 1e-6

    def test_requires_float64(self):
        w = ParamTensor("w", np.array([1.0], dtype=np.float32))
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda: (w.tensor * w.tensor).sum(), [w])

    def test_transformer_block_loss(self):
        # full block: linear -> attention -> layer_norm -> CE
        with dtype_scope(np.float64):
            rng = np.random.default_rng(0)
            d, n, v = 6, 4, 5
            wq = ParamTensor("wq", rng.normal(0, 0.5, (d, d)))
            bq = ParamTensor("bq", np.zeros(d))
            g = ParamTensor("g", np.ones(d))
            b = ParamTensor("b", np.zeros(d))
            head = ParamTensor("head", rng.normal(0, 0.5, (d, v)))
            bh = ParamTensor("bh", np.zeros(v))
            x = Tensor(rng.normal(size=(n, d)))
            params = [wq, bq, g, b, head, bh]

            def f():
                q = linear(x, wq, bq)
                out, _ = attention(q, q, q, heads=2)
                normed = layer_norm(out + x, g, b)
                logits = linear(normed, head, bh)
                return cross_entropy(logits, [0, 1, 2, 3])

            zero_grads(params)
            err = grad_check(f, params, eps=1e-4)
        assert err < 1e-4
