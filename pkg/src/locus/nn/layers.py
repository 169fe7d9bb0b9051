"""Attention layers built on the autograd engine.

A transformer block here is: multi-head attention with a residual and
layer norm, then a position-wise two-layer feed-forward network with a
second residual and layer norm. Attention is bidirectional with no
positional encodings and no masking, so stacking blocks stays
permutation-equivariant over the key/value rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = {"gelu": T.gelu, "relu": T.relu}


@dataclass
class TBlockParams:
    """Weights of one transformer block.

    Per-head projections (query/key/value of width d/h, per-head output
    back to d), two layer-norm affines, and the d -> d_ff -> d FFN.
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    bq: list[Tensor]
    bk: list[Tensor]
    bv: list[Tensor]
    wo: list[Tensor]
    bo: Tensor
    ln0_gain: Tensor
    ln0_shift: Tensor
    ln1_gain: Tensor
    ln1_shift: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    activation: str = "gelu"
    ln_eps: float = 1e-5

    @property
    def n_heads(self):
        return len(self.wq)

    @property
    def head_dim(self):
        return self.wq[0].data.shape[1]

    @property
    def width(self):
        return self.wq[0].data.shape[0]


def layer_norm(x, gain, shift, eps=1e-5):
    """Spec alias: per-row zero-mean unit-variance normalization + affine."""
    if eps <= 0:
        raise ValueError("layer norm eps must be > 0")
    return T.layer_norm_rows(x, gain, shift, eps)


def softmax(v):
    """Softmax over the last axis of a vector or the rows of a matrix."""
    if v.data.ndim == 1:
        return softmax_vector(v)
    return T.softmax_rows(v)


def softmax_vector(v):
    if v.data.ndim != 1:
        raise ValueError("softmax_vector expects a 1-D tensor")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    out = e / e.sum()
    result = Tensor(out)
    if v.requires_grad:
        result.requires_grad = True
        result._parents = (v,)

        def backward(g):
            dot = float((g * out).sum())
            v._accumulate(out * (g - dot))

        result._backward = backward
    return result


def multi_head_attention(q, k, v, p: TBlockParams):
    """Scaled dot-product attention per head, head outputs summed into d.

    Summing per-head (dh x d) output projections is algebraically the
    usual concat-then-project form.
    """
    n_k = k.data.shape[0]
    if v.data.shape[0] != n_k:
        raise ValueError("key/value row count mismatch")
    if q.data.shape[1] != p.width or k.data.shape[1] != p.width:
        raise ValueError("attention width mismatch")
    inv_sqrt = 1.0 / math.sqrt(p.head_dim)
    out = None
    for i in range(p.n_heads):
        qi = T.add(T.matmul(q, p.wq[i]), p.bq[i])
        ki = T.add(T.matmul(k, p.wk[i]), p.bk[i])
        vi = T.add(T.matmul(v, p.wv[i]), p.bv[i])
        scores = T.scale(T.matmul(qi, T.transpose(ki)), inv_sqrt)
        weights = T.softmax_rows(scores)
        head = T.matmul(T.matmul(weights, vi), p.wo[i])
        out = head if out is None else T.add(out, head)
    return T.add(out, p.bo)


def feed_forward(x, p: TBlockParams):
    act = ACTIVATIONS[p.activation]
    hidden = act(T.add(T.matmul(x, p.ff_w1), p.ff_b1))
    return T.add(T.matmul(hidden, p.ff_w2), p.ff_b2)


def transformer_block(q, k, v, p: TBlockParams):
    attn = multi_head_attention(q, k, v, p)
    qbar = layer_norm(T.add(q, attn), p.ln0_gain, p.ln0_shift, p.ln_eps)
    ff = feed_forward(qbar, p)
    return layer_norm(T.add(qbar, ff), p.ln1_gain, p.ln1_shift, p.ln_eps)


def bce_loss(p, y, clamp=1e-7):
    """Scalar binary cross-entropy for scalar prediction/target."""
    pt = p if isinstance(p, Tensor) else T.constant(np.asarray(p, dtype=np.float64))
    if pt.data.ndim == 0:
        pt_row = Tensor(pt.data.reshape(1, 1))
        pt_row.requires_grad = pt.requires_grad
        pt = pt_row
    return T.mean(T.bce_elementwise(pt, np.full(pt.data.shape, y, dtype=pt.data.dtype), clamp))


def mlp_2layer(x, w1, b1, w2, b2, activation="gelu"):
    """x @ w1 + b1 -> activation -> @ w2 + b2 (the predictor body)."""
    act = ACTIVATIONS[activation]
    h = act(T.add(T.matmul(x, w1), b1))
    return T.add(T.matmul(h, w2), b2)
