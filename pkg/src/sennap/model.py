"""Dual-head next-activity network with an optional explanation head.

Architecture: a shared two-layer LSTM stack (input width -> 100 -> 100) feeds
two branches, each batch norm + one LSTM layer (100 -> 100) + batch norm + a
dense head.  The activity head emits |A|+1 logits (end-of-sequence included);
the time head emits one unactivated real.  In self-explaining mode a dense +
sigmoid head over the shared stack's final hidden state scores every input
feature in [0, 1].  Every LSTM layer output gets dropout 0.2 in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neural import (
    BatchNormParams,
    DenseParams,
    LSTMLayerParams,
    Var,
    batch_norm,
    constant,
    dense,
    dropout_mask,
    init_batchnorm,
    init_dense,
    init_lstm,
    last_step,
    lstm_layer,
    mul,
    reshape,
    sigmoid,
    softmax,
)

HIDDEN_SIZE = 100
DROPOUT_RATE = 0.2
EXTRA_FEATURES = 5


@dataclass
class NapModelParams:
    """All weights of the network plus batch-norm running statistics."""

    shared1: LSTMLayerParams
    shared2: LSTMLayerParams
    act_bn_in: BatchNormParams
    act_lstm: LSTMLayerParams
    act_bn_out: BatchNormParams
    act_head: DenseParams
    time_bn_in: BatchNormParams
    time_lstm: LSTMLayerParams
    time_bn_out: BatchNormParams
    time_head: DenseParams
    exp_head: DenseParams | None
    vocab_size: int
    k: int
    m: int = EXTRA_FEATURES
    hidden: int = HIDDEN_SIZE
    dropout: float = DROPOUT_RATE

    @property
    def selfexplain(self) -> bool:
        return self.exp_head is not None

    @property
    def width(self) -> int:
        return self.vocab_size + self.m

    @property
    def n_features(self) -> int:
        return self.k * self.width

    @property
    def n_classes(self) -> int:
        return self.vocab_size + 1

    def named_parameters(self) -> list[tuple[str, Var]]:
        groups = [
            self.shared1.named("shared1"),
            self.shared2.named("shared2"),
            self.act_bn_in.named("act_bn_in"),
            self.act_lstm.named("act_lstm"),
            self.act_bn_out.named("act_bn_out"),
            self.act_head.named("act_head"),
            self.time_bn_in.named("time_bn_in"),
            self.time_lstm.named("time_lstm"),
            self.time_bn_out.named("time_bn_out"),
            self.time_head.named("time_head"),
        ]
        if self.exp_head is not None:
            groups.append(self.exp_head.named("exp_head"))
        return [pair for group in groups for pair in group]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix in ("act_bn_in", "act_bn_out", "time_bn_in", "time_bn_out"):
            out.extend(getattr(self, prefix).named_buffers(prefix))
        return out

    def parameter_count(self) -> int:
        return sum(int(p.value.size) for _, p in self.named_parameters())

    def copy(self) -> "NapModelParams":
        """Deep copy of all parameter values and running statistics."""
        clone = init_model(
            self.vocab_size,
            self.k,
            selfexplain=self.selfexplain,
            seed=0,
            dtype=self.shared1.W_f.value.dtype,
        )
        src_params = dict(self.named_parameters())
        for name, p in clone.named_parameters():
            p.value = src_params[name].value.copy()
        src_buffers = dict(self.named_buffers())
        for name, buf in clone.named_buffers():
            buf[...] = src_buffers[name]
        return clone


def init_model(
    vocab_size: int,
    k: int,
    *,
    selfexplain: bool = False,
    seed: int = 0,
    dtype=np.float32,
) -> NapModelParams:
    """Initialize all weights from a seed.

    The explanation head draws from its own derived stream so the trunk and
    branch weights are identical between baseline and self-explaining models
    built from the same seed.
    """
    trunk_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    head_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    width = vocab_size + EXTRA_FEATURES
    n_classes = vocab_size + 1
    params = NapModelParams(
        shared1=init_lstm(trunk_rng, width, HIDDEN_SIZE, dtype),
        shared2=init_lstm(trunk_rng, HIDDEN_SIZE, HIDDEN_SIZE, dtype),
        act_bn_in=init_batchnorm(HIDDEN_SIZE, dtype),
        act_lstm=init_lstm(trunk_rng, HIDDEN_SIZE, HIDDEN_SIZE, dtype),
        act_bn_out=init_batchnorm(HIDDEN_SIZE, dtype),
        act_head=init_dense(trunk_rng, HIDDEN_SIZE, n_classes, dtype),
        time_bn_in=init_batchnorm(HIDDEN_SIZE, dtype),
        time_lstm=init_lstm(trunk_rng, HIDDEN_SIZE, HIDDEN_SIZE, dtype),
        time_bn_out=init_batchnorm(HIDDEN_SIZE, dtype),
        time_head=init_dense(trunk_rng, HIDDEN_SIZE, 1, dtype),
        exp_head=(
            init_dense(head_rng, HIDDEN_SIZE, k * width, dtype) if selfexplain else None
        ),
        vocab_size=vocab_size,
        k=k,
    )
    return params


@dataclass
class GraphOutputs:
    """Tape nodes produced by one propagation."""

    nap_logits: Var
    time_pred: Var | None
    exp_scores: Var | None
    shared_last: Var


@dataclass
class ForwardOutputs:
    """Plain-numpy outputs of an inference pass."""

    nap_probs: np.ndarray            # (B, |A|+1), rows sum to 1
    time_pred: np.ndarray            # (B,)
    explanation_scores: np.ndarray | None  # (B, k*width) in [0, 1]


def forward_graph(
    params: NapModelParams,
    x: np.ndarray | Var,
    *,
    train: bool,
    rng: np.random.Generator | None = None,
    nap_only: bool = False,
    with_explanation: bool | None = None,
    bn_update: bool = True,
) -> GraphOutputs:
    """Build the forward tape for a (B, k, width) batch.

    `x` may itself be a tape node (the masked second propagation).  Dropout
    masks are drawn from `rng` in a fixed layer order; batch-norm running
    statistics move only when `train and bn_update`.
    """
    node = x if isinstance(x, Var) else constant(np.asarray(x))
    if node.value.ndim != 3 or node.value.shape[1:] != (params.k, params.width):
        raise ValueError(
            f"expected (B, {params.k}, {params.width}) input, got {node.value.shape}"
        )
    if train and params.dropout > 0.0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    if with_explanation is None:
        with_explanation = params.selfexplain and not nap_only
    if with_explanation and params.exp_head is None:
        raise ValueError("model has no explanation head")
    dtype = node.value.dtype
    update = train and bn_update

    def dropped(seq: Var) -> Var:
        if not train or params.dropout <= 0.0:
            return seq
        mask = dropout_mask(rng, seq.value.shape, params.dropout, dtype)
        return mul(seq, constant(mask))

    h1 = dropped(lstm_layer(node, params.shared1))
    h2 = dropped(lstm_layer(h1, params.shared2))

    a_in = batch_norm(h2, params.act_bn_in, train, update)
    a_seq = dropped(lstm_layer(a_in, params.act_lstm))
    a_last = batch_norm(last_step(a_seq), params.act_bn_out, train, update)
    nap_logits = dense(a_last, params.act_head)

    time_pred = None
    if not nap_only:
        t_in = batch_norm(h2, params.time_bn_in, train, update)
        t_seq = dropped(lstm_layer(t_in, params.time_lstm))
        t_last = batch_norm(last_step(t_seq), params.time_bn_out, train, update)
        time_pred = reshape(dense(t_last, params.time_head), (node.value.shape[0],))

    shared_last = last_step(h2)
    exp_scores = None
    if with_explanation:
        exp_scores = sigmoid(dense(shared_last, params.exp_head))

    return GraphOutputs(nap_logits, time_pred, exp_scores, shared_last)


def forward(
    params: NapModelParams,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    batch_size: int = 512,
) -> ForwardOutputs:
    """Numpy-facing forward pass, chunked so large batches stay in memory."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    probs = []
    times = []
    scores = []
    for start in range(0, x.shape[0], batch_size):
        chunk = x[start : start + batch_size]
        out = forward_graph(params, chunk, train=(mode == "train"), rng=rng)
        probs.append(softmax(out.nap_logits.value))
        times.append(out.time_pred.value)
        if out.exp_scores is not None:
            scores.append(out.exp_scores.value)
    return ForwardOutputs(
        nap_probs=np.concatenate(probs),
        time_pred=np.concatenate(times),
        explanation_scores=np.concatenate(scores) if scores else None,
    )


def predict_class(nap_probs: np.ndarray) -> np.ndarray | int:
    """Argmax class; ties resolve to the lowest index."""
    probs = np.asarray(nap_probs)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return np.argmax(probs, axis=-1)


def make_predictor(params: NapModelParams, batch_size: int = 512):
    """Class-prediction closure over flat (B, k*width) inputs (inference mode)."""
    k, width = params.k, params.width

    def predict(flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.float32)
        if flat.ndim == 1:
            flat = flat[None]
        grids = flat.reshape(-1, k, width)
        classes = np.empty(grids.shape[0], dtype=np.int64)
        for start in range(0, grids.shape[0], batch_size):
            chunk = grids[start : start + batch_size]
            out = forward_graph(params, chunk, train=False, nap_only=True)
            classes[start : start + chunk.shape[0]] = np.argmax(
                out.nap_logits.value, axis=1
            )
        return classes

    return predict
