"""Minimal dense-tensor autograd engine.

A Tensor wraps a 2-D (or 1-D / scalar) numpy array and records the ops
applied to it so that reverse-mode gradients can be pulled back from a
scalar loss. The op set is exactly what the attention encoder and the
correctness predictor need: no general broadcasting, no view tracking,
no graph optimization. float32 is the production dtype; float64 is
supported so tests can run finite-difference checks where they are
numerically meaningful.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np

# per-thread/context so concurrent inference workers cannot race the flag
_GRAD_ENABLED = ContextVar("locus_grad_enabled", default=True)
_MAC_TRACKING = False
_MAC_COUNT = 0


@contextmanager
def no_grad():
    """Disable graph recording (inference / evaluation)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class MacCounter:
    """Counts multiply-accumulate ops of matmuls run inside the context.

    Used by cost-accounting tests to verify the latent bottleneck keeps
    attention linear in the number of evaluation tokens.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        global _MAC_TRACKING, _MAC_COUNT
        self._prev_tracking = _MAC_TRACKING
        self._start = _MAC_COUNT
        _MAC_TRACKING = True
        return self

    def __exit__(self, *exc):
        global _MAC_TRACKING, _MAC_COUNT
        self.total = _MAC_COUNT - self._start
        _MAC_TRACKING = self._prev_tracking
        return False


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from this scalar into every reachable tensor."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    # operator sugar used sparsely in layer code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def _result(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(data, dtype=None):
    """A leaf tensor that never receives gradients.

    Keeps the input dtype (f32/f64); non-float input becomes f32.
    """
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def add(a, b):
    """Elementwise add; also accepts a 1-D bias broadcast over rows of a."""
    if a.data.shape == b.data.shape:
        out_data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return _result(out_data, (a, b), backward, "add")
    if b.data.ndim == 1 and a.data.ndim == 2 and a.data.shape[1] == b.data.shape[0]:
        out_data = a.data + b.data[None, :]

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0))

        return _result(out_data, (a, b), backward, "add")
    raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(out_data, (a, b), backward, "mul")


def scale(a, c):
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * a.data.dtype.type(c))

    return _result(out_data, (a,), backward, "scale")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    global _MAC_COUNT
    if _MAC_TRACKING:
        m, k = a.data.shape
        n = b.data.shape[1]
        _MAC_COUNT += m * k * n
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out_data, (a, b), backward, "matmul")


def transpose(a):
    out_data = a.data.T.copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _result(out_data, (a,), backward, "transpose")


def concat_cols(a, b):
    if a.data.shape[0] != b.data.shape[0]:
        raise ValueError("concat_cols row mismatch")
    na = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :na])
        if b.requires_grad:
            b._accumulate(g[:, na:])

    return _result(out_data, (a, b), backward, "concat_cols")


def repeat_row(a, n):
    """Tile a 1xd row n times; gradient sums back over the copies."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ValueError("repeat_row expects a 1xd tensor")
    out_data = np.repeat(a.data, n, axis=0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=0, keepdims=True))

    return _result(out_data, (a,), backward, "repeat_row")


def mean(a):
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)
    inv = 1.0 / a.data.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g * inv))

    return _result(out_data, (a,), backward, "mean")


def tsum(a):
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    return _result(out_data, (a,), backward, "sum")


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward, "sigmoid")


def relu(a):
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _result(out_data, (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            a._accumulate(g * da)

    return _result(out_data, (a,), backward, "gelu")


def softmax_rows(a):
    """Row-wise softmax with max-subtraction for stability."""
    x = a.data
    if x.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D tensor")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _result(out_data, (a,), backward, "softmax")


def layer_norm_rows(a, gain, shift, eps=1e-5):
    """Per-row standardization followed by an affine map.

    gain and shift are 1-D of width d; eps keeps zero-variance rows finite.
    """
    x = a.data
    if x.ndim != 2:
        raise ValueError("layer_norm_rows expects a 2-D tensor")
    d = x.shape[1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ValueError("layer norm affine shape mismatch")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mu) * inv_std
    out_data = xhat * gain.data[None, :] + shift.data[None, :]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data[None, :]
            term = dxhat - dxhat.mean(axis=1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            a._accumulate(term * inv_std)

    return _result(out_data, (a, gain, shift), backward, "layer_norm")


def bce_elementwise(p, y, clamp=1e-7):
    """-(y ln p + (1-y) ln(1-p)) with p clamped to [clamp, 1-clamp].

    y is a constant array of targets in [0, 1] shaped like p.
    """
    targets = np.asarray(y, dtype=p.data.dtype)
    if targets.shape != p.data.shape:
        raise ValueError("bce target shape mismatch")
    lo = p.data.dtype.type(clamp)
    hi = p.data.dtype.type(1.0 - clamp)
    clamped = np.clip(p.data, lo, hi)
    inside = (p.data > lo) & (p.data < hi)
    out_data = -(targets * np.log(clamped) + (1.0 - targets) * np.log1p(-clamped))

    def backward(g):
        if p.requires_grad:
            grad = (clamped - targets) / (clamped * (1.0 - clamped))
            p._accumulate(g * grad * inside)

    return _result(out_data, (p,), backward, "bce")


def mean_of_scalars(scalars):
    """Average a list of scalar tensors (mean over models in a batch)."""
    if not scalars:
        raise ValueError("empty scalar list")
    total = scalars[0]
    for s in scalars[1:]:
        total = add(total, s)
    return scale(total, 1.0 / len(scalars))
