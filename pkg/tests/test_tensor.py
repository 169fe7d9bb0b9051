"""Autograd engine: op-level gradients against finite differences."""

import numpy as np
import pytest

from locus.nn import tensor as T
from locus.nn.params import ParamStore, adam_step


def fd_grad(loss_fn, store, name, idx, h=1e-6):
    p = store[name]
    flat = p.data.reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    up = loss_fn()
    flat[idx] = orig - h
    down = loss_fn()
    flat[idx] = orig
    return (up - down) / (2 * h)


def check_store_grads(loss_fn, build_loss, store, coords, rtol=1e-6):
    store.zero_grad()
    build_loss().backward()
    grads = store.grads()
    for name, idx in coords:
        fd = fd_grad(loss_fn, store, name, idx)
        an = grads[name].reshape(-1)[idx]
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an), 1e-8), \
            f"{name}[{idx}]: fd={fd:.8g} analytic={an:.8g}"


def make_store(rng, shapes):
    store = ParamStore(dtype=np.float64)
    for name, shape in shapes.items():
        store.add(name, rng.normal(size=shape))
    return store


def test_matmul_add_mean_grads():
    rng = np.random.default_rng(0)
    store = make_store(rng, {"w": (4, 3), "b": (3,)})
    x = rng.normal(size=(5, 4))

    def build():
        return T.mean(T.add(T.matmul(T.constant(x, np.float64), store["w"]), store["b"]))

    def value():
        return build().item()

    coords = [("w", i) for i in range(12)] + [("b", i) for i in range(3)]
    check_store_grads(value, build, store, coords)


def test_mul_sigmoid_gelu_relu_grads():
    rng = np.random.default_rng(1)
    store = make_store(rng, {"a": (3, 4), "b": (3, 4)})

    def build():
        x = T.mul(store["a"], store["b"])
        return T.mean(T.add(T.add(T.sigmoid(x), T.gelu(x)), T.relu(x)))

    def value():
        return build().item()

    coords = [("a", i) for i in range(12)] + [("b", i) for i in range(12)]
    check_store_grads(value, build, store, coords, rtol=1e-5)


def test_softmax_rows_grad_and_shift_invariance():
    rng = np.random.default_rng(2)
    store = make_store(rng, {"x": (3, 5)})
    w = rng.normal(size=(3, 5))

    def build():
        return T.mean(T.mul(T.softmax_rows(store["x"]), T.constant(w, np.float64)))

    def value():
        return build().item()

    check_store_grads(value, build, store, [("x", i) for i in range(15)])

    x = rng.normal(size=(4, 6)).astype(np.float32)
    a = T.softmax_rows(T.constant(x)).data
    b = T.softmax_rows(T.constant(x + 3.7)).data
    assert np.allclose(a, b, atol=1e-6)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_closed_forms():
    from locus.nn.layers import softmax
    e = np.e
    out = softmax(T.constant(np.array([1.0, 2.0]))).data
    assert np.allclose(out, [1 / (1 + e), e / (1 + e)], atol=1e-6)
    assert np.allclose(softmax(T.constant(np.zeros(3))).data, np.full(3, 1 / 3))
    assert np.allclose(softmax(T.constant(np.array([42.0]))).data, [1.0])


def test_layer_norm_grads_and_cases():
    rng = np.random.default_rng(3)
    store = make_store(rng, {"x": (3, 4), "g": (4,), "s": (4,)})
    w = rng.normal(size=(3, 4))

    def build():
        return T.mean(T.mul(
            T.layer_norm_rows(store["x"], store["g"], store["s"]),
            T.constant(w, np.float64)))

    def value():
        return build().item()

    coords = [("x", i) for i in range(12)] + [("g", i) for i in range(4)] \
        + [("s", i) for i in range(4)]
    check_store_grads(value, build, store, coords, rtol=1e-5)

    # constant row, unit affine -> zeros; zero gain -> shift broadcast
    x = T.constant(np.full((2, 4), 3.0))
    ones, zeros = T.constant(np.ones(4)), T.constant(np.zeros(4))
    assert np.allclose(T.layer_norm_rows(x, ones, zeros).data, 0.0, atol=1e-3)
    shift = T.constant(np.array([1.0, 2.0, 3.0, 4.0]))
    out = T.layer_norm_rows(x, zeros, shift).data
    assert np.allclose(out, np.tile(shift.data, (2, 1)))


def test_layer_norm_two_pass_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4)).astype(np.float32)
    g = rng.normal(size=4).astype(np.float32)
    s = rng.normal(size=4).astype(np.float32)
    got = T.layer_norm_rows(T.constant(x), T.constant(g), T.constant(s), eps=1e-5).data

    expect = np.empty_like(x, dtype=np.float64)
    for i in range(3):
        mu = x[i].astype(np.float64).mean()
        var = ((x[i] - mu) ** 2).mean()
        expect[i] = (x[i] - mu) / np.sqrt(var + 1e-5) * g + s
    assert np.allclose(got, expect, atol=1e-6)


def test_bce_closed_forms():
    from locus.nn.layers import bce_loss
    assert abs(bce_loss(0.5, 1.0).item() - np.log(2)) < 1e-6
    assert abs(bce_loss(0.9, 0.0).item() - np.log(10)) < 1e-5
    assert bce_loss(1.0, 1.0).item() <= 1e-6
    assert bce_loss(0.0, 0.0).item() <= 1e-6


def test_bce_grad():
    rng = np.random.default_rng(5)
    store = make_store(rng, {"x": (4, 1)})
    y = rng.integers(0, 2, size=(4, 1)).astype(np.float64)

    def build():
        return T.mean(T.bce_elementwise(T.sigmoid(store["x"]), y))

    def value():
        return build().item()

    check_store_grads(value, build, store, [("x", i) for i in range(4)])


def test_grad_zero_for_unused_parameter():
    rng = np.random.default_rng(6)
    store = make_store(rng, {"used": (2, 2), "unused": (3, 3)})
    loss = T.mean(store["used"])
    store.zero_grad()
    loss.backward()
    grads = store.grads()
    assert np.allclose(grads["used"], 0.25)
    assert np.allclose(grads["unused"], 0.0)


def test_sum_grad_all_ones():
    rng = np.random.default_rng(7)
    store = make_store(rng, {"p": (3, 2)})
    store.zero_grad()
    T.tsum(store["p"]).backward()
    assert np.allclose(store.grads()["p"], 1.0)


def test_concat_repeat_transpose_grads():
    rng = np.random.default_rng(8)
    store = make_store(rng, {"a": (1, 3), "b": (4, 2)})
    w = rng.normal(size=(4, 5))

    def build():
        rep = T.repeat_row(store["a"], 4)
        cat = T.concat_cols(rep, store["b"])
        return T.mean(T.mul(cat, T.constant(w, np.float64)))

    def value():
        return build().item()

    coords = [("a", i) for i in range(3)] + [("b", i) for i in range(8)]
    check_store_grads(value, build, store, coords)


def test_adam_zero_grad_is_identity():
    rng = np.random.default_rng(9)
    store = make_store(rng, {"p": (3, 3)})
    before = store["p"].data.copy()
    adam_step(store, {"p": np.zeros((3, 3))})
    assert np.array_equal(store["p"].data, before)


def test_adam_first_step_matches_formula():
    rng = np.random.default_rng(10)
    store = ParamStore(dtype=np.float64)
    store.add("p", rng.normal(size=(4,)))
    before = store["p"].data.copy()
    g = rng.normal(size=(4,))
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    adam_step(store, {"p": g}, lr=lr, beta1=b1, beta2=b2, eps=eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = before - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert np.allclose(store["p"].data, expected, atol=1e-12)


def test_adam_determinism_over_100_steps():
    def run():
        rng = np.random.default_rng(11)
        store = ParamStore()
        store.add("p", rng.normal(size=(5, 5)))
        grng = np.random.default_rng(12)
        for _ in range(100):
            adam_step(store, {"p": grng.normal(size=(5, 5)).astype(np.float32)})
        return store["p"].data.copy()

    assert np.array_equal(run(), run())


def test_nan_propagation_is_an_error():
    a = T.constant(np.array([[1.0, np.inf]]))
    with pytest.raises(FloatingPointError):
        T.scale(a, 2.0)


def test_backward_requires_scalar():
    x = T.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        T.scale(x, 1.0).backward()
