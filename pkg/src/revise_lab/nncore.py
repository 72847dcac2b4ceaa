"""Layer primitives, AdamW, and the finite-difference gradient oracle.

Everything here operates on `autodiff.Tensor`; parameters are `ParamTensor`
leaves whose `trainable` flag gates both gradient recording and optimizer
updates (a frozen parameter is never touched, byte for byte).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    matmul,
    mul,
    no_grad,
    reshape,
    rsqrt,
    softmax_last,
    tmean,
    transpose,
)

LAYER_NORM_EPS = 1e-5
CE_PROB_FLOOR = 1e-12
_CE_LOSS_CAP = -math.log(CE_PROB_FLOOR)


class ParamTensor:
    """A named leaf tensor with a gradient buffer and a trainable flag."""

    __slots__ = ("name", "tensor", "_trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.asarray(data), requires_grad=trainable)
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.tensor.requires_grad = self._trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class OptimizerState:
    """AdamW moments plus hyperparameters; one step counter for the run."""

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def linear(x: Tensor, w: ParamTensor, b: ParamTensor) -> Tensor:
    """x @ w + b with shape validation that names both operands."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"linear: inner dimensions disagree, x has shape {tuple(x.shape)} "
            f"but weight {w.name!r} has shape {tuple(w.shape)}"
        )
    return matmul(x, w.tensor) + b.tensor


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None):
    """Scaled dot-product attention split into `heads`.

    2D inputs (m×d) return (out m×d, weights heads×m×n); 3D inputs carry a
    leading batch dim (B×m×d -> B×heads×m×n weights). Every weights row is
    a distribution over the n keys. `mask` is an optional additive (m×n)
    array (e.g. -1e9 above the diagonal for causal decoding).
    """
    m, d = q.shape[-2], q.shape[-1]
    n = k.shape[-2]
    if n < 1:
        raise ValueError("attention: need at least one key")
    if d % heads != 0:
        raise ValueError(f"attention: dim {d} not divisible by heads {heads}")
    dh = d // heads
    if q.ndim == 2:
        qh = transpose(reshape(q, (m, heads, dh)), (1, 0, 2))           # h,m,dh
        kh = transpose(reshape(k, (n, heads, dh)), (1, 2, 0))           # h,dh,n
        vh = transpose(reshape(v, (n, heads, dh)), (1, 0, 2))           # h,n,dh
    else:
        b = q.shape[0]
        qh = transpose(reshape(q, (b, m, heads, dh)), (0, 2, 1, 3))     # b,h,m,dh
        kh = transpose(reshape(k, (b, n, heads, dh)), (0, 2, 3, 1))     # b,h,dh,n
        vh = transpose(reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))     # b,h,n,dh
    scores = mul(matmul(qh, kh), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    weights = softmax_last(scores)
    if float(np.abs(weights.data.sum(axis=-1) - 1.0).max()) > 1e-5:
        raise AssertionError("attention: softmax rows do not sum to 1")
    if q.ndim == 2:
        out = reshape(transpose(matmul(weights, vh), (1, 0, 2)), (m, d))
    else:
        out = reshape(transpose(matmul(weights, vh), (0, 2, 1, 3)), (q.shape[0], m, d))
    return out, weights


def layer_norm(x: Tensor, gain: ParamTensor, bias: ParamTensor) -> Tensor:
    """Per-row normalization with epsilon 1e-5 inside the square root."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = rsqrt(var + LAYER_NORM_EPS)
    return mul(xc, inv) * gain.tensor + bias.tensor


def cross_entropy(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean -log softmax(logits)[target] over non-ignored positions.

    Probabilities are floored at 1e-12, so single-position losses are capped
    instead of diverging; capped positions get zero gradient.
    """
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if t.shape[0] != x.shape[0]:
        raise ValueError(f"cross_entropy: {x.shape[0]} rows vs {t.shape[0]} targets")
    valid = t != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: all positions ignored (empty loss)")
    vocab = x.shape[1]
    tv = t[valid]
    if tv.min() < 0 or tv.max() >= vocab:
        raise ValueError(f"cross_entropy: target id out of range [0, {vocab})")

    xv = x[valid]
    mx = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - mx)
    sum_e = e.sum(axis=1)
    # log(sum) via log1p(sum-1) keeps tiny losses representable
    log_z = mx[:, 0] + np.log1p(sum_e - 1.0)
    per_pos = log_z - xv[np.arange(n_valid), tv]
    capped = per_pos > _CE_LOSS_CAP
    per_pos = np.minimum(per_pos, _CE_LOSS_CAP)
    loss_val = np.asarray(per_pos.mean(), dtype=x.dtype)

    softmax = e / sum_e[:, None]

    def vjp(g):
        rows = softmax.copy()
        rows[np.arange(n_valid), tv] -= 1.0
        rows[capped] = 0.0
        full = np.zeros_like(x)
        full[valid] = rows * (g / n_valid)
        return full

    from .autodiff import _make  # late import keeps the op registered on the tape

    return _make(loss_val, ((logits, vjp),))


def adamw_step(params, state: OptimizerState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam step over the trainable params.

    Validates all gradients before mutating anything, so a NaN aborts the
    step with the parameter's name and leaves every tensor untouched.
    """
    params = list(params)
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise RuntimeError(f"adamw_step: non-finite gradient in parameter {p.name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    step_lr = state.lr if lr is None else lr
    for p in params:
        if not p.trainable:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        arr = p.tensor.data
        if state.weight_decay:
            arr -= (step_lr * state.weight_decay) * arr
        arr -= (step_lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(arr.dtype)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max down to lr_min over total_steps."""
    if total_steps <= 0:
        return lr_max
    frac = min(max(step, 0), total_steps) / total_steps
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f, params, eps: float = 1e-4, atol: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `f` re-evaluates the scalar loss from the current parameter values. Run
    under float64 (`dtype_scope`); float32 round-off swamps the comparison.
    Frozen parameters are reported as (0, 0) on both sides. Element pairs
    where both magnitudes are below `atol` count as zero error.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, got {p.data.dtype} for {p.name!r}")
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }
    max_err = 0.0
    with no_grad():
        for p in params:
            if not p.trainable:
                continue
            a = analytic[p.name].ravel()
            flat = p.data.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f().item()
                flat[i] = orig - eps
                f_minus = f().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(a[i]), abs(fd))
                if denom <= atol:
                    continue
                max_err = max(max_err, abs(a[i] - fd) / denom)
    zero_grads(params)
    return max_err
