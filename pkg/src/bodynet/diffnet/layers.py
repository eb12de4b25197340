"""Neural building blocks as pure functions over a :class:`ParameterSet`.

Every layer is described by a :class:`LayerSpec`; its parameters live in the
shared parameter set under ``spec.name``.  ``init_*`` functions create the
parameters, ``*_forward`` functions consume them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import ShapeError, Tensor

LAYER_KINDS = frozenset(
    {"conv1d_block", "linear", "gru", "multihead_attention", "batchnorm", "dropout", "maxpool"}
)
ENCODER_KERNELS = (3, 2, 2, 2, 2, 2)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 1
    pool: int = 0
    dropout: float = 0.0
    hidden: int = 0
    layers: int = 1
    heads: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {self.dropout}")
        if self.kind == "multihead_attention" and self.in_dim % self.heads:
            raise ValueError(f"width {self.in_dim} not divisible by {self.heads} heads")


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


# -- linear ------------------------------------------------------------------

def init_linear(
    params: ParameterSet, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True
) -> None:
    bound = 1.0 / math.sqrt(d_in)
    params.add(f"{name}.w", _uniform(rng, bound, (d_out, d_in)))
    if bias:
        params.add(f"{name}.b", _uniform(rng, bound, (d_out,)))


def linear_forward(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    """Affine map ``y = W x + b`` over the trailing axis (``b`` optional)."""
    w = params[f"{name}.w"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"{name}: trailing dimension {x.shape[-1]} != d_in {w.shape[1]}", dim="d_in"
        )
    y = T.matmul(x, T.transpose(w))
    return y + params[f"{name}.b"] if f"{name}.b" in params else y


# -- normalization / regularization -----------------------------------------

def init_batchnorm(params: ParameterSet, name: str, channels: int) -> None:
    params.add(f"{name}.gamma", np.ones(channels))
    params.add(f"{name}.beta", np.zeros(channels))
    params.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
    params.add(f"{name}.running_var", np.ones(channels), trainable=False)


def batchnorm_forward(x: Tensor, params: ParameterSet, name: str, training: bool) -> Tensor:
    """Per-channel batch normalization of ``[B, C]`` or ``[B, C, T]`` input.

    In training mode the batch statistics are used and the running buffers
    are updated in place with momentum 0.1 (unbiased variance); at inference
    the running buffers are used.
    """
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    gamma = T.reshape(params[f"{name}.gamma"], bshape)
    beta = T.reshape(params[f"{name}.beta"], bshape)
    rm = params[f"{name}.running_mean"]
    rv = params[f"{name}.running_var"]
    if training:
        mu = T.tmean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = T.tmean(centered * centered, axis=axes, keepdims=True)
        n = int(np.prod([x.shape[a] for a in axes]))
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        rm.data[...] = (1 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * mu.data.reshape(-1)
        rv.data[...] = (1 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * unbiased
        xhat = centered / T.sqrt(var + BN_EPS)
    else:
        xhat = (x - rm.data.reshape(bshape)) / np.sqrt(rv.data.reshape(bshape) + BN_EPS)
    return xhat * gamma + beta


def dropout_forward(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity at inference or when no generator is given."""
    if not training or rng is None or p == 0.0:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {p}")
        return x
    return T.dropout(x, p, rng)


def maxpool_forward(x: Tensor, width: int) -> Tensor:
    return T.maxpool1d(x, width)


def adaptive_avg_pool1d(x: Tensor, segments: int) -> Tensor:
    """Average ``[..., T]`` into ``segments`` contiguous bins along time."""
    length = x.shape[-1]
    if length < segments:
        raise ShapeError(f"cannot pool {length} steps into {segments} segments", dim="time")
    pool = np.zeros((length, segments))
    for i in range(segments):
        lo = (i * length) // segments
        hi = -((-(i + 1) * length) // segments)
        pool[lo:hi, i] = 1.0 / (hi - lo)
    return T.matmul(x, pool)


# -- convolution block ---------------------------------------------------------

def init_conv1d_block(params: ParameterSet, spec: LayerSpec, rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(spec.in_dim * spec.kernel)
    params.add(f"{spec.name}.conv.w", _uniform(rng, bound, (spec.out_dim, spec.in_dim, spec.kernel)))
    init_batchnorm(params, f"{spec.name}.bn", spec.out_dim)


def conv1d_block_forward(
    x: Tensor,
    spec: LayerSpec,
    params: ParameterSet,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Conv over time -> batch norm -> ReLU -> dropout -> max pool.

    ``x`` is ``[batch, channels, time]``; the kernel slides along time only.
    Pooling is skipped when ``spec.pool`` is 0 or 1.  The convolution has no
    bias of its own: batch norm removes any per-channel constant and its
    shift ``beta`` plays that role.
    """
    if x.ndim != 3:
        raise ShapeError(f"{spec.name}: expected [batch, channels, time], got {x.shape}", dim="rank")
    if x.shape[1] != spec.in_dim:
        raise ShapeError(
            f"{spec.name}: channels_in {x.shape[1]} != expected {spec.in_dim}", dim="channels_in"
        )
    if x.shape[2] < spec.kernel:
        raise ShapeError(
            f"{spec.name}: time {x.shape[2]} shorter than kernel {spec.kernel}", dim="time"
        )
    h = T.conv1d(x, params[f"{spec.name}.conv.w"])
    h = batchnorm_forward(h, params, f"{spec.name}.bn", training)
    h = T.relu(h)
    h = dropout_forward(h, spec.dropout, training, rng)
    if spec.pool > 1:
        h = T.maxpool1d(h, spec.pool)
    return h


# -- recurrent -----------------------------------------------------------------

def init_gru(params: ParameterSet, spec: LayerSpec, rng: np.random.Generator) -> None:
    H = spec.hidden
    for layer in range(spec.layers):
        d_in = spec.in_dim if layer == 0 else H
        p = f"{spec.name}.l{layer}"
        params.add(f"{p}.w_ih", _uniform(rng, 1.0 / math.sqrt(d_in), (3 * H, d_in)))
        params.add(f"{p}.w_hh", _uniform(rng, 1.0 / math.sqrt(H), (3 * H, H)))
        params.add(f"{p}.b_ih", np.zeros(3 * H))
        params.add(f"{p}.b_hh", np.zeros(3 * H))


def gru_forward(x: Tensor, spec: LayerSpec, params: ParameterSet) -> Tensor:
    """Stacked GRU over ``[batch, time, features]``; returns the top layer's last state.

    Gate rows are ordered (reset, update, candidate):

        r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h
    """
    if x.ndim != 3:
        raise ShapeError(f"{spec.name}: expected [batch, time, features], got {x.shape}", dim="rank")
    B, steps, _ = x.shape
    if steps < 1:
        raise ShapeError(f"{spec.name}: empty time axis", dim="time")
    H = spec.hidden
    seq = x
    h = None
    for layer in range(spec.layers):
        p = f"{spec.name}.l{layer}"
        w_ih, w_hh = params[f"{p}.w_ih"], params[f"{p}.w_hh"]
        b_ih, b_hh = params[f"{p}.b_ih"], params[f"{p}.b_hh"]
        if seq.shape[-1] != w_ih.shape[1]:
            raise ShapeError(f"{p}: features {seq.shape[-1]} != {w_ih.shape[1]}", dim="features")
        gi_all = T.matmul(seq, T.transpose(w_ih)) + b_ih  # [B, steps, 3H]
        h = Tensor(np.zeros((B, H)))
        outputs = []
        for t in range(steps):
            gi = gi_all[:, t, :]
            gh = T.matmul(h, T.transpose(w_hh)) + b_hh
            r = T.sigmoid(gi[:, :H] + gh[:, :H])
            z = T.sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
            n = T.tanh(gi[:, 2 * H :] + r * gh[:, 2 * H :])
            h = (1.0 - z) * n + z * h
            outputs.append(h)
        seq = T.stack(outputs, axis=1)
    return h


# -- attention -----------------------------------------------------------------

def init_multihead_attention(params: ParameterSet, spec: LayerSpec, rng: np.random.Generator) -> None:
    d = spec.in_dim
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{spec.name}.{proj}", d, d, rng, bias=proj != "k")


def multihead_attention_forward(
    x: Tensor, spec: LayerSpec, params: ParameterSet, return_weights: bool = False
):
    """Scaled dot-product self-attention across the second axis of ``[batch, J, d]``.

    The key projection carries no bias: it would add the same amount to
    every score of a row, which the softmax cancels.

    No positional encoding is added, so permuting the rows of ``x`` permutes
    the output rows identically.
    """
    if x.ndim != 3:
        raise ShapeError(f"{spec.name}: expected [batch, J, d], got {x.shape}", dim="rank")
    B, J, d = x.shape
    heads = spec.heads
    if d % heads:
        raise ShapeError(f"{spec.name}: width {d} not divisible by {heads} heads", dim="d")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, J, heads, dh)), (0, 2, 1, 3))

    q = split(linear_forward(x, params, f"{spec.name}.q"))
    k = split(linear_forward(x, params, f"{spec.name}.k"))
    v = split(linear_forward(x, params, f"{spec.name}.v"))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)  # [B, heads, J, J]
    ctx = T.matmul(attn, v)  # [B, heads, J, dh]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, J, d))
    out = linear_forward(ctx, params, f"{spec.name}.o")
    return (out, attn) if return_weights else out
