"""Named parameter storage with Adam state.

All learned tensors of a model live in one ParamStore under unique
dotted names, which is what checkpointing, gradient collection, and the
optimizer operate on. Structured views (TBlockParams etc.) alias the
same Tensor objects.
"""

from __future__ import annotations

import math

import numpy as np

from .layers import TBlockParams
from .tensor import Tensor, parameter


class ParamStore:
    def __init__(self, dtype=np.float32):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.dtype = dtype

    def add(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = parameter(np.asarray(array, dtype=self.dtype))
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        """Gradient per parameter; zeros for parameters off the loss path."""
        out = {}
        for name, t in self.params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def state_arrays(self):
        return {name: self.params[name].data for name in self.names()}

    def load_arrays(self, arrays):
        for name, t in self.params.items():
            src = np.asarray(arrays[name], dtype=self.dtype)
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch loading '{name}': {src.shape} vs {t.data.shape}")
            t.data = src.copy()

    def n_parameters(self):
        return sum(t.data.size for t in self.params.values())


def adam_step(store: ParamStore, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update over every parameter in the store."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def glorot(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


def init_tblock(store: ParamStore, prefix, d, n_heads, d_ff, rng,
                activation="gelu", ln_eps=1e-5) -> TBlockParams:
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    wq, wk, wv, bq, bk, bv, wo = [], [], [], [], [], [], []
    for i in range(n_heads):
        wq.append(store.add(f"{prefix}.h{i}.wq", glorot(rng, d, dh)))
        wk.append(store.add(f"{prefix}.h{i}.wk", glorot(rng, d, dh)))
        wv.append(store.add(f"{prefix}.h{i}.wv", glorot(rng, d, dh)))
        bq.append(store.add(f"{prefix}.h{i}.bq", np.zeros(dh)))
        bk.append(store.add(f"{prefix}.h{i}.bk", np.zeros(dh)))
        bv.append(store.add(f"{prefix}.h{i}.bv", np.zeros(dh)))
        wo.append(store.add(f"{prefix}.h{i}.wo", glorot(rng, dh, d)))
    return TBlockParams(
        wq=wq, wk=wk, wv=wv, bq=bq, bk=bk, bv=bv, wo=wo,
        bo=store.add(f"{prefix}.bo", np.zeros(d)),
        ln0_gain=store.add(f"{prefix}.ln0.gain", np.ones(d)),
        ln0_shift=store.add(f"{prefix}.ln0.shift", np.zeros(d)),
        ln1_gain=store.add(f"{prefix}.ln1.gain", np.ones(d)),
        ln1_shift=store.add(f"{prefix}.ln1.shift", np.zeros(d)),
        ff_w1=store.add(f"{prefix}.ff.w1", glorot(rng, d, d_ff)),
        ff_b1=store.add(f"{prefix}.ff.b1", np.zeros(d_ff)),
        ff_w2=store.add(f"{prefix}.ff.w2", glorot(rng, d_ff, d)),
        ff_b2=store.add(f"{prefix}.ff.b2", np.zeros(d)),
        activation=activation,
        ln_eps=ln_eps,
    )
