import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from revise_lab.autodiff import (
    Tensor,
    concat,
    dtype_scope,
    embed_rows,
    gelu,
    matmul,
    narrow,
    no_grad,
    rsqrt,
    softmax_last,
    tile0,
)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x.data)
    flat = x.data.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul"])
def test_binary_op_grads(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    with dtype_scope(np.float64):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(3, 4)) + 3.0 if op == "div" else rng.normal(size=(4, 2) if op == "matmul" else (3, 4)))

        dunder = {"add": "__add__", "sub": "__sub__", "mul": "__mul__", "div": "__truediv__"}

        def f():
            x = a @ b if op == "matmul" else getattr(a, dunder[op])(b)
            return (x * x).sum()

        loss = f()
        loss.backward()
        ga, gb = a.grad.copy(), b.grad.copy()
        a.grad = b.grad = None
        assert np.allclose(ga, numeric_grad(f, a), atol=1e-6)
        assert np.allclose(gb, numeric_grad(f, b), atol=1e-6)


def test_broadcast_add_grad_sums():
    with dtype_scope(np.float64):
        a = leaf(np.zeros((5, 3)))
        b = leaf(np.zeros(3))
        (a + b).sum().backward()
        assert b.grad.shape == (3,)
        assert np.all(b.grad == 5.0)


@pytest.mark.parametrize(
    "fn", [gelu, rsqrt, softmax_last, lambda t: tile0(t, 3), lambda t: narrow(t, 0, 1, 1)]
)
def test_unary_op_grads(fn):
    rng = np.random.default_rng(7)
    with dtype_scope(np.float64):
        a = leaf(rng.normal(size=(3, 4)) ** 2 + 0.5)  # positive, for rsqrt

        def f():
            x = fn(a)
            return (x * x).sum()

        f().backward()
        ga = a.grad.copy()
        a.grad = None
        assert np.allclose(ga, numeric_grad(f, a), atol=1e-5)


def test_embed_rows_scatter_grad():
    with dtype_scope(np.float64):
        table = leaf(np.ones((5, 2)))
        out = embed_rows(table, [1, 1, 4])
        out.sum().backward()
        expected = np.zeros((5, 2))
        expected[1] = 2.0
        expected[4] = 1.0
        assert np.array_equal(table.grad, expected)


def test_concat_splits_gradient():
    with dtype_scope(np.float64):
        a, b = leaf(np.zeros((2, 2))), leaf(np.zeros((3, 2)))
        out = concat([a, b], axis=0)
        (out * Tensor(np.arange(10.0).reshape(5, 2))).sum().backward()
        assert np.array_equal(a.grad, np.arange(4.0).reshape(2, 2))
        assert np.array_equal(b.grad, np.arange(4.0, 10.0).reshape(3, 2))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(6, 9)).astype(np.float32))
    s = softmax_last(x)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-5)


def test_no_grad_blocks_graph():
    a = leaf(np.ones((2, 2)))
    with no_grad():
        out = (a * 3.0).sum()
    assert not out.requires_grad
    assert out._vjps == ()


def test_backward_requires_scalar():
    a = leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_grad_accumulates_across_backwards():
    a = leaf(np.ones(3))
    (a * 2.0).sum().backward()
    (a * 2.0).sum().backward()
    assert np.all(a.grad == 4.0)


@settings(max_examples=30, derandomize=True)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
def test_matmul_matches_numpy(m, k, n):
    rng = np.random.default_rng(m * 31 + k * 7 + n)
    a = rng.normal(size=(m, k)).astype(np.float32)
    b = rng.normal(size=(k, n)).astype(np.float32)
    out = matmul(Tensor(a), Tensor(b))
    assert np.allclose(out.data, a @ b, atol=1e-6)


def test_batched_matmul_grad():
    rng = np.random.default_rng(11)
    with dtype_scope(np.float64):
        a = leaf(rng.normal(size=(2, 3, 4)))
        b = leaf(rng.normal(size=(2, 4, 5)))

        def f():
            return ((a @ b) ** 2).sum()

        f().backward()
        ga, gb = a.grad.copy(), b.grad.copy()
        a.grad = b.grad = None
        assert np.allclose(ga, numeric_grad(f, a), atol=1e-5)
        assert np.allclose(gb, numeric_grad(f, b), atol=1e-5)


def test_dtype_scope_switches_and_restores():
    t_before = Tensor([1.0])
    with dtype_scope(np.float64):
        t_in = Tensor([1.0])
    t_after = Tensor([1.0])
    assert t_before.data.dtype == np.float32
    assert t_in.data.dtype == np.float64
    assert t_after.data.dtype == np.float32
