"""Self-contained differentiable numeric core.

Reverse-mode differentiation for the fixed operation set this architecture
needs (no general autodiff): dense layers, the standard four-gate LSTM cell,
batch normalization, inverted dropout, softmax cross-entropy, MAE, batch-mean
L1, a straight-through masked blend, and Adam.  Values are numpy arrays; the
tape is a plain DAG of `Var` nodes with per-node backward closures.

All computations preserve the dtype of their inputs (float32 in training,
float64 in gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Var:
    """One node of the reverse-mode tape, wrapping a single ndarray."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, *, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


def parameter(value) -> Var:
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    return Var(value)


def backward(root: Var):
    """Reverse sweep from a scalar root, accumulating grads into the tape."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    out_value = a.value @ b.value

    def back(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    return Var(out_value, parents=(a, b), backward=back)


def add(a: Var, b: Var) -> Var:
    out_value = a.value + b.value

    def back(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(g, b.value.shape))

    return Var(out_value, parents=(a, b), backward=back)


def mul(a: Var, b: Var) -> Var:
    out_value = a.value * b.value

    def back(g):
        a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Var(out_value, parents=(a, b), backward=back)


def scale(a: Var, factor: float) -> Var:
    def back(g):
        a.accumulate(g * factor)

    return Var(a.value * factor, parents=(a,), backward=back)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # overflow-free: compute sigma(|x|) in place, then mirror for negative x
    s = np.abs(x)
    np.negative(s, out=s)
    np.exp(s, out=s)
    np.add(s, 1.0, out=s)
    np.reciprocal(s, out=s)
    return np.where(x >= 0, s, 1.0 - s)


def sigmoid(a: Var) -> Var:
    y = _sigmoid_np(a.value)

    def back(g):
        a.accumulate(g * y * (1.0 - y))

    return Var(y, parents=(a,), backward=back)


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)

    def back(g):
        a.accumulate(g * (1.0 - y * y))

    return Var(y, parents=(a,), backward=back)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    def back(g):
        a.accumulate(g.reshape(a.value.shape))

    return Var(a.value.reshape(shape), parents=(a,), backward=back)


def last_step(a: Var) -> Var:
    """Select the final time step of a (B, T, H) sequence."""
    if a.value.ndim != 3:
        raise ValueError(f"last_step expects (B, T, H), got {a.shape}")

    def back(g):
        full = np.zeros_like(a.value)
        full[:, -1, :] = g
        a.accumulate(full)

    return Var(a.value[:, -1, :], parents=(a,), backward=back)


# ---------------------------------------------------------------------------
# dense layer
# ---------------------------------------------------------------------------


@dataclass
class DenseParams:
    W: Var  # (in, out)
    b: Var  # (out,)

    def named(self, prefix: str):
        return [(f"{prefix}.W", self.W), (f"{prefix}.b", self.b)]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_dense(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> DenseParams:
    return DenseParams(
        W=parameter(glorot_uniform(rng, (d_in, d_out), dtype)),
        b=parameter(np.zeros(d_out, dtype=dtype)),
    )


def dense(x: Var, params: DenseParams) -> Var:
    return add(matmul(x, params.W), params.b)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LSTMLayerParams:
    """Gate weights over the concatenation [h_prev, x_t] (hidden block first)."""

    W_f: Var
    W_i: Var
    W_c: Var
    W_o: Var
    b_f: Var
    b_i: Var
    b_c: Var
    b_o: Var
    hidden_size: int
    input_size: int

    def named(self, prefix: str):
        return [
            (f"{prefix}.{name}", getattr(self, name))
            for name in ("W_f", "W_i", "W_c", "W_o", "b_f", "b_i", "b_c", "b_o")
        ]


def init_lstm(
    rng: np.random.Generator, input_size: int, hidden_size: int, dtype=np.float32
) -> LSTMLayerParams:
    def weight():
        return parameter(glorot_uniform(rng, (hidden_size, hidden_size + input_size), dtype))

    return LSTMLayerParams(
        W_f=weight(),
        W_i=weight(),
        W_c=weight(),
        W_o=weight(),
        # forget bias starts at 1 so early training retains cell state
        b_f=parameter(np.ones(hidden_size, dtype=dtype)),
        b_i=parameter(np.zeros(hidden_size, dtype=dtype)),
        b_c=parameter(np.zeros(hidden_size, dtype=dtype)),
        b_o=parameter(np.zeros(hidden_size, dtype=dtype)),
        hidden_size=hidden_size,
        input_size=input_size,
    )


def lstm_cell_step(
    params: LSTMLayerParams,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    x_t: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One plain-numpy cell update for a single instance (reference path)."""
    h_prev = np.asarray(h_prev)
    c_prev = np.asarray(c_prev)
    x_t = np.asarray(x_t)
    if h_prev.shape != (params.hidden_size,) or c_prev.shape != (params.hidden_size,):
        raise ValueError(
            f"state shapes {h_prev.shape}/{c_prev.shape} do not match H={params.hidden_size}"
        )
    if x_t.shape != (params.input_size,):
        raise ValueError(f"input shape {x_t.shape} does not match D={params.input_size}")
    hx = np.concatenate([h_prev, x_t])
    f = _sigmoid_np(params.W_f.value @ hx + params.b_f.value)
    i = _sigmoid_np(params.W_i.value @ hx + params.b_i.value)
    c_bar = np.tanh(params.W_c.value @ hx + params.b_c.value)
    c = f * c_prev + i * c_bar
    o = _sigmoid_np(params.W_o.value @ hx + params.b_o.value)
    h = o * np.tanh(c)
    return h, c


def lstm_layer(x: Var, params: LSTMLayerParams) -> Var:
    """Full-sequence LSTM node, h_0 = c_0 = 0, fused gate matmuls.

    Input (B, T, D) -> output (B, T, H).  The input-side gate contributions
    and the weight gradients are computed as single whole-sequence matmuls;
    only the hidden-state recurrence runs per step.  Backward is classic BPTT
    over the cached per-step activations.
    """
    xv = x.value
    if xv.ndim != 3 or xv.shape[2] != params.input_size:
        raise ValueError(
            f"lstm_layer expects (B, T, {params.input_size}), got {xv.shape}"
        )
    B, T, D = xv.shape
    H = params.hidden_size
    dtype = xv.dtype
    # column blocks in gate order [f, i, c, o]; rows [:H] act on h, [H:] on x
    w_cat = np.concatenate(
        [params.W_f.value.T, params.W_i.value.T, params.W_c.value.T, params.W_o.value.T],
        axis=1,
    ).astype(dtype, copy=False)
    b_cat = np.concatenate(
        [params.b_f.value, params.b_i.value, params.b_c.value, params.b_o.value]
    ).astype(dtype, copy=False)
    w_h = w_cat[:H]
    w_x = w_cat[H:]

    # (T, B, 4H): input-side gate pre-activations for every step at once
    x_part = (xv.reshape(B * T, D) @ w_x + b_cat).reshape(B, T, 4 * H)
    x_part = np.ascontiguousarray(x_part.transpose(1, 0, 2))

    h_prev_cache = np.empty((T, B, H), dtype=dtype)
    gate_cache = np.empty((T, B, 4 * H), dtype=dtype)
    c_cache = np.empty((T, B, H), dtype=dtype)
    tanh_c_cache = np.empty((T, B, H), dtype=dtype)
    out = np.empty((B, T, H), dtype=dtype)

    h = np.zeros((B, H), dtype=dtype)
    c = np.zeros((B, H), dtype=dtype)
    for t in range(T):
        h_prev_cache[t] = h
        raw = x_part[t] + h @ w_h
        f = _sigmoid_np(raw[:, :H])
        i = _sigmoid_np(raw[:, H : 2 * H])
        c_bar = np.tanh(raw[:, 2 * H : 3 * H])
        o = _sigmoid_np(raw[:, 3 * H :])
        c_new = f * c + i * c_bar
        tanh_c = np.tanh(c_new)
        h = o * tanh_c
        gate_cache[t, :, :H] = f
        gate_cache[t, :, H : 2 * H] = i
        gate_cache[t, :, 2 * H : 3 * H] = c_bar
        gate_cache[t, :, 3 * H :] = o
        c_cache[t] = c_new
        tanh_c_cache[t] = tanh_c
        out[:, t, :] = h
        c = c_new

    def back(g):
        d_raw_all = np.empty((T, B, 4 * H), dtype=dtype)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            f = gate_cache[t, :, :H]
            i = gate_cache[t, :, H : 2 * H]
            c_bar = gate_cache[t, :, 2 * H : 3 * H]
            o = gate_cache[t, :, 3 * H :]
            tanh_c = tanh_c_cache[t]
            c_prev = c_cache[t - 1] if t > 0 else np.zeros((B, H), dtype=dtype)

            dh = g[:, t, :] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
            d_raw = d_raw_all[t]
            d_raw[:, :H] = (dc * c_prev) * (f * (1.0 - f))
            d_raw[:, H : 2 * H] = (dc * c_bar) * (i * (1.0 - i))
            d_raw[:, 2 * H : 3 * H] = (dc * i) * (1.0 - c_bar * c_bar)
            d_raw[:, 3 * H :] = (dh * tanh_c) * (o * (1.0 - o))
            dc_next = dc * f
            dh_next = d_raw @ w_h.T

        d_flat = d_raw_all.reshape(T * B, 4 * H)
        d_w_h = h_prev_cache.reshape(T * B, H).T @ d_flat
        x_steps = np.ascontiguousarray(xv.transpose(1, 0, 2)).reshape(T * B, D)
        d_w_x = x_steps.T @ d_flat
        d_bcat = d_flat.sum(axis=0)

        for block, (W, b) in enumerate(
            ((params.W_f, params.b_f), (params.W_i, params.b_i),
             (params.W_c, params.b_c), (params.W_o, params.b_o))
        ):
            cols = slice(block * H, (block + 1) * H)
            W.accumulate(
                np.concatenate([d_w_h[:, cols].T, d_w_x[:, cols].T], axis=1)
            )
            b.accumulate(d_bcat[cols])
        if x.requires_grad:
            dx = (d_flat @ w_x.T).reshape(T, B, D)
            x.accumulate(dx.transpose(1, 0, 2))

    parents = (
        x,
        params.W_f,
        params.W_i,
        params.W_c,
        params.W_o,
        params.b_f,
        params.b_i,
        params.b_c,
        params.b_o,
    )
    return Var(out, parents=parents, backward=back)


def dropout_mask(
    rng: np.random.Generator, shape: tuple[int, ...], rate: float, dtype=np.float32
) -> np.ndarray:
    """Inverted-dropout multiplier: keep with probability 1-rate, scale by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape, dtype=dtype)
    if rate >= 1.0:
        return np.zeros(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


def lstm_layer_forward(
    params: LSTMLayerParams,
    xs: np.ndarray,
    dropout: float = 0.0,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Convenience forward pass; train mode applies inverted dropout to outputs."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    xs = np.asarray(xs)
    squeeze = xs.ndim == 2
    if squeeze:
        xs = xs[None]
    out = lstm_layer(constant(xs), params)
    value = out.value
    if mode == "train" and dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        value = value * dropout_mask(rng, value.shape, dropout, value.dtype)
    return value[0] if squeeze else value


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: Var
    beta: Var
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def num_features(self) -> int:
        return self.gamma.value.shape[0]

    def named(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix: str):
        return [
            (f"{prefix}.running_mean", self.running_mean),
            (f"{prefix}.running_var", self.running_var),
        ]


def init_batchnorm(num_features: int, dtype=np.float32) -> BatchNormParams:
    return BatchNormParams(
        gamma=parameter(np.ones(num_features, dtype=dtype)),
        beta=parameter(np.zeros(num_features, dtype=dtype)),
        running_mean=np.zeros(num_features, dtype=dtype),
        running_var=np.ones(num_features, dtype=dtype),
    )


def batch_norm(x: Var, bn: BatchNormParams, train: bool, update_running: bool = True) -> Var:
    """Normalize over all axes but the last.

    Train mode uses biased batch statistics and, when `update_running` is set,
    folds them into the running estimates (momentum 0.1).  Infer mode is the
    affine map through the running statistics.
    """
    xv = x.value
    C = bn.num_features
    if xv.shape[-1] != C:
        raise ValueError(f"batch_norm expects trailing dim {C}, got {xv.shape}")
    flat = xv.reshape(-1, C)
    dtype = xv.dtype
    eps = dtype.type(bn.eps)

    if train:
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (flat - mean) * inv_std
        if update_running:
            m = bn.momentum
            bn.running_mean[...] = (1.0 - m) * bn.running_mean + m * mean
            bn.running_var[...] = (1.0 - m) * bn.running_var + m * var
    else:
        inv_std = 1.0 / np.sqrt(bn.running_var + eps)
        x_hat = (flat - bn.running_mean) * inv_std
    out = (bn.gamma.value * x_hat + bn.beta.value).reshape(xv.shape)

    def back(g):
        g_flat = g.reshape(-1, C)
        bn.gamma.accumulate((g_flat * x_hat).sum(axis=0))
        bn.beta.accumulate(g_flat.sum(axis=0))
        if not x.requires_grad:
            return
        if train:
            # biased-variance batch-norm backward in its compact form
            d_hat = g_flat * bn.gamma.value
            dx = inv_std * (
                d_hat
                - d_hat.mean(axis=0)
                - x_hat * (d_hat * x_hat).mean(axis=0)
            )
        else:
            dx = g_flat * bn.gamma.value * inv_std
        x.accumulate(dx.reshape(xv.shape))

    return Var(out, parents=(x, bn.gamma, bn.beta), backward=back)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Var, classes: np.ndarray) -> Var:
    """Mean over the batch of -log softmax(logits)[class]."""
    lv = logits.value
    if lv.ndim != 2:
        raise ValueError(f"expected (B, C) logits, got {lv.shape}")
    B, C = lv.shape
    classes = np.asarray(classes)
    if classes.shape != (B,):
        raise ValueError(f"expected {B} class labels, got shape {classes.shape}")
    if classes.min() < 0 or classes.max() >= C:
        raise ValueError(f"class index out of range [0, {C})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(B), classes]
    loss = (log_z - picked).mean()
    probs = softmax(lv)

    def back(g):
        d = probs.copy()
        d[np.arange(B), classes] -= 1.0
        logits.accumulate(g * d / B)

    return Var(np.asarray(loss, dtype=lv.dtype), parents=(logits,), backward=back)


def mae_loss(pred: Var, target: np.ndarray) -> Var:
    pv = pred.value
    target = np.asarray(target, dtype=pv.dtype)
    if pv.shape != target.shape:
        raise ValueError(f"shape mismatch {pv.shape} vs {target.shape}")
    diff = pv - target
    loss = np.abs(diff).mean()

    def back(g):
        # subgradient of |.| at 0 is taken as 0
        pred.accumulate(g * np.sign(diff) / diff.size)

    return Var(np.asarray(loss, dtype=pv.dtype), parents=(pred,), backward=back)


def l1_batch_mean(values: Var) -> Var:
    """Sum of absolute values, averaged over the leading (batch) axis."""
    vv = values.value
    if vv.ndim != 2:
        raise ValueError(f"expected (B, n) values, got {vv.shape}")
    B = vv.shape[0]
    loss = np.abs(vv).sum() / B

    def back(g):
        values.accumulate(g * np.sign(vv) / B)

    return Var(np.asarray(loss, dtype=vv.dtype), parents=(values,), backward=back)


def masked_blend(
    scores: Var,
    x_flat: np.ndarray,
    noise: np.ndarray,
    forced: np.ndarray,
    tau: float,
) -> tuple[Var, np.ndarray]:
    """z = x where (scores >= tau or forced), sampled noise elsewhere.

    The hard mask is treated as identity for the gradient back to the scores
    (straight-through); positions the scores cannot control (forced columns)
    pass no gradient.  Returns (z node, hard mask).
    """
    sv = scores.value
    hard = (sv >= tau) | forced
    z = np.where(hard, x_flat, noise).astype(sv.dtype)
    pass_through = (~forced).astype(sv.dtype)

    def back(g):
        scores.accumulate(g * (x_flat - noise) * pass_through)

    return Var(z, parents=(scores,), backward=back), hard


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    named_params: Sequence[tuple[str, Var]],
    state: AdamState,
    learning_rate: float,
):
    """Standard bias-corrected Adam update; clears grads afterwards."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= (learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.value.dtype, copy=False
        )
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def max_rel_error(
    build_loss: Callable[[], Var],
    wrt: Sequence[Var],
    rng: np.random.Generator,
    entries_per_var: int = 4,
    eps: float = 1e-4,
) -> float:
    """Worst relative error of analytic grads vs central finite differences.

    `build_loss` must rebuild the (deterministic) graph from the current
    parameter values on every call.  Checks a random sample of entries per
    parameter; parameters are restored afterwards.
    """
    loss = build_loss()
    backward(loss)
    analytic = []
    for p in wrt:
        if p.grad is None:
            analytic.append(np.zeros_like(p.value))
        else:
            analytic.append(p.grad.copy())
        p.grad = None

    worst = 0.0
    for p, grad in zip(wrt, analytic):
        flat = p.value.reshape(-1)
        count = min(entries_per_var, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = float(build_loss().value)
            flat[idx] = orig - eps
            lo = float(build_loss().value)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(grad.reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst
