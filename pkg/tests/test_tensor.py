import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamlm import tensor as T

import oracles


def f64(x):
    return T.Tensor(np.asarray(x, dtype=np.float64))


def test_matmul_hand_example():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="matmul shape mismatch"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_softmax_symmetry():
    p = T.row_softmax(T.Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(p.data, 1.0 / 3.0)


def test_cross_entropy_uniform_16():
    ce = T.cross_entropy(T.Tensor(np.zeros((1, 16))), np.array([5]), np.array([1.0]))
    assert abs(ce.item() - np.log(16)) < 1e-12


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(seed, r, c):
    rng = np.random.default_rng(seed)
    p = T.row_softmax(T.Tensor(rng.normal(size=(r, c)) * 3))
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-6)


def test_causal_softmax_masks_future():
    x = T.Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    p = T.row_softmax(x, causal_offset=1)
    assert (p.data > 0).sum(axis=-1).tolist() == [2, 3, 4]
    assert p.data[0, 2:].tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-12)


def test_causal_softmax_inplace_matches():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 6))
    a = T.row_softmax(T.Tensor(x.copy()), causal_offset=2)
    b = T.row_softmax(T.Tensor(x.copy()), causal_offset=2, inplace=True)
    np.testing.assert_array_equal(a.data, b.data)


def test_grad_of_sum_is_ones():
    x = T.Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True,
                 dtype=np.float64)
    with T.Tape() as tape:
        loss = T.tsum(x)
    T.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_cross_entropy_grad_closed_form():
    rng = np.random.default_rng(3)
    logits = T.Tensor(rng.normal(size=(4, 7)), requires_grad=True, dtype=np.float64)
    targets = np.array([1, 0, 6, 3])
    w = np.ones(4)
    with T.Tape() as tape:
        loss = T.cross_entropy(logits, targets, w)
    T.backward(loss, tape)
    sm = np.exp(logits.data - logits.data.max(-1, keepdims=True))
    sm /= sm.sum(-1, keepdims=True)
    onehot = np.zeros((4, 7))
    onehot[np.arange(4), targets] = 1
    np.testing.assert_allclose(logits.grad, sm - onehot, atol=1e-12)


def _two_layer_net(params, inp, targets, w):
    h = T.silu(T.matmul(inp, params["w1"]))
    h = T.rms_norm(h, params["g1"])
    logits = T.matmul(h, params["w2"])
    return T.cross_entropy(logits, targets, w)


def test_random_net_matches_finite_differences():
    rng = np.random.default_rng(4)
    with T.precision("f64"):
        params = {
            "w1": T.Tensor(rng.normal(size=(6, 9)), requires_grad=True, dtype=np.float64),
            "g1": T.Tensor(np.ones(9), requires_grad=True, dtype=np.float64),
            "w2": T.Tensor(rng.normal(size=(9, 5)), requires_grad=True, dtype=np.float64),
        }
        inp = T.Tensor(rng.normal(size=(3, 6)), dtype=np.float64)
        targets = np.array([0, 4, 2])
        w = np.full(3, 1 / 3)
        err = T.grad_check(lambda: _two_layer_net(params, inp, targets, w), params)
    assert err < 1e-4


def test_grad_check_identity_is_exact():
    x = T.Tensor(np.random.default_rng(5).normal(size=(4,)), requires_grad=True,
                 dtype=np.float64)
    err = T.grad_check(lambda: T.tsum(x), {"x": x})
    assert err < 1e-10


def test_grad_check_detects_corrupted_matmul_backward(monkeypatch):
    real_matmul = T.matmul

    def corrupted(a, b):
        out = real_matmul(a, b)
        tape = T.active_tape()
        if tape is not None and tape.nodes:
            node = tape.nodes[-1]
            orig = node.backward
            node.backward = lambda g: tuple(
                None if pg is None else pg * 1.25 for pg in orig(g))
        return out

    rng = np.random.default_rng(6)
    with T.precision("f64"):
        params = {"w": T.Tensor(rng.normal(size=(5, 5)), requires_grad=True,
                                dtype=np.float64)}
        inp = T.Tensor(rng.normal(size=(2, 5)), dtype=np.float64)
        monkeypatch.setattr(T, "matmul", corrupted)
        err = T.grad_check(
            lambda: T.cross_entropy(T.matmul(inp, params["w"]),
                                    np.array([1, 2]), np.ones(2)), params)
    assert err > 1e-2


def test_grad_check_requires_f64():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(T.PrecisionError):
        T.grad_check(lambda: T.tsum(x), {"x": x})


def test_backward_deterministic():
    rng = np.random.default_rng(7)
    w_data = rng.normal(size=(6, 6))
    inp = rng.normal(size=(4, 6))
    grads = []
    for _ in range(2):
        w = T.Tensor(w_data.copy(), requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            h = T.silu(T.matmul(T.Tensor(inp, dtype=np.float64), w))
            loss = T.tsum(T.mul(h, h))
        T.backward(loss, tape)
        grads.append(w.grad.tobytes())
    assert grads[0] == grads[1]


def test_nonfinite_forward_reports_node():
    x = T.Tensor(np.array([[np.inf, 1.0]]))
    with T.Tape():
        with pytest.raises(T.NonFiniteError, match="matmul"):
            T.matmul(x, T.Tensor(np.ones((2, 2))))


def test_backward_requires_scalar_loss():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(y, tape)


def test_backward_before_forward():
    x = T.Tensor(np.ones(()), requires_grad=True)
    with pytest.raises(RuntimeError, match="before any forward"):
        T.backward(x, T.Tape())


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(5, 9))
    targets = rng.integers(0, 9, size=5)
    w = rng.random(5)
    got = T.cross_entropy(T.Tensor(logits, dtype=np.float64), targets, w).item()
    want = oracles.scalar_cross_entropy(logits, targets, w)
    assert abs(got - want) < 1e-9


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20, deadline=None)
def test_add_mul_broadcast_grads(seed):
    rng = np.random.default_rng(seed)
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    with T.Tape() as tape:
        loss = T.tsum(T.mul(T.add(a, b), T.add(a, b)))
    T.backward(loss, tape)
    want = 2 * (a.data + b.data)
    np.testing.assert_allclose(a.grad, want, atol=1e-12)
    np.testing.assert_allclose(b.grad, want.sum(axis=0), atol=1e-12)


def test_precision_context():
    assert T.default_dtype() == np.float32
    with T.precision("f64"):
        assert T.default_dtype() == np.float64
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.default_dtype() == np.float32
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_slice_concat_roundtrip_grads():
    x = T.Tensor(np.random.default_rng(9).normal(size=(2, 6, 3)),
                 requires_grad=True, dtype=np.float64)
    with T.Tape() as tape:
        parts = [T.slice_seq(x, 0, 2), T.slice_seq(x, 2, 6)]
        y = T.concat_seq(parts)
        loss = T.tsum(T.mul(y, y))
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_place_grads_split():
    base = T.Tensor(np.zeros((2, 4, 3)), requires_grad=True, dtype=np.float64)
    vals = T.Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    idx = (np.array([0, 1]), np.array([1, 2]))
    with T.Tape() as tape:
        y = T.place(base, idx, vals)
        loss = T.tsum(y)
    T.backward(loss, tape)
    assert base.grad[0, 1].sum() == 0 and base.grad[1, 2].sum() == 0
    assert base.grad.sum() == 2 * 4 * 3 - 6
    np.testing.assert_array_equal(vals.grad, np.ones((2, 3)))
