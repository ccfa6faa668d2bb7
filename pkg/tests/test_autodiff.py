import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from encore_bench.autodiff import nn
from encore_bench.autodiff import tensor as T
from encore_bench.autodiff.checkpoint import MAGIC, dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from encore_bench.autodiff.gradcheck import check_gradients, relative_error
from encore_bench.autodiff.optim import AdamState, adam_step
from encore_bench.autodiff.tensor import Tape, Tensor
from encore_bench.errors import BadCheckpoint, DetachedNode, MissingGrad, NotScalar, ShapeMismatch


def P(*shape, seed=0, lo=-1.0, hi=1.0):
    return nn.param(np.random.default_rng(seed).uniform(lo, hi, size=shape))


def weights(shape, seed=99):
    # fixed random projection makes every output entry matter to the loss
    return np.random.default_rng(seed).normal(size=shape)


def scalarize(y):
    return T.sum(T.mul(y, weights(y.shape)))


# (name, parameter factory, forward) - each forward returns a tensor
OPS = {
    "add": (lambda: [P(3, 4), P(4, seed=1)], lambda a, b: T.add(a, b)),
    "sub": (lambda: [P(2, 3, 4), P(3, 4, seed=1)], lambda a, b: T.sub(a, b)),
    "mul": (lambda: [P(3, 4), P(3, 4, seed=1)], lambda a, b: T.mul(a, b)),
    "div": (lambda: [P(3, 4), P(4, seed=1, lo=0.5, hi=2.0)], lambda a, b: T.div(a, b)),
    "matmul": (lambda: [P(2, 3, 4), P(4, 5, seed=1)], lambda a, b: T.matmul(a, b)),
    "matmul_batched": (lambda: [P(2, 3, 4), P(2, 4, 5, seed=1)], lambda a, b: T.matmul(a, b)),
    "expand": (lambda: [P(1, 4)], lambda a: T.expand(a, (3, 2, 4))),
    "concat": (lambda: [P(2, 3), P(2, 5, seed=1)], lambda a, b: T.concat([a, b], axis=-1)),
    "stack": (lambda: [P(2, 3), P(2, 3, seed=1)], lambda a, b: T.stack([a, b], axis=1)),
    "getitem_gather": (lambda: [P(4, 3)], lambda a: T.getitem(a, (np.array([0, 2, 2, 3]), np.array([1, 0, 0, 2])))),
    "slice": (lambda: [P(3, 6)], lambda a: T.slice(a, 1, 4)),
    "reshape": (lambda: [P(2, 6)], lambda a: T.reshape(a, (3, 4))),
    "transpose": (lambda: [P(2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
    "sum": (lambda: [P(2, 3, 4)], lambda a: T.sum(a, axis=1)),
    "mean": (lambda: [P(2, 3, 4)], lambda a: T.mean(a, axis=(0, 2))),
    "relu": (lambda: [P(3, 4, seed=5)], lambda a: T.relu(a)),
    "exp": (lambda: [P(3, 4)], lambda a: T.exp(a)),
    "log": (lambda: [P(3, 4, lo=0.5, hi=3.0)], lambda a: T.log(a)),
    "sqrt": (lambda: [P(3, 4, lo=0.5, hi=3.0)], lambda a: T.sqrt(a)),
    "tanh": (lambda: [P(3, 4, lo=-2, hi=2)], lambda a: T.tanh(a)),
    "logcosh": (lambda: [P(3, 4, lo=-4, hi=4)], lambda a: T.logcosh(a)),
    "clip": (lambda: [P(3, 4, lo=-2, hi=2)], lambda a: T.clip(a, -1.0, 1.0)),
    "masked_fill": (lambda: [P(3, 3)], lambda a: T.masked_fill(a, nn.causal_mask(3), 0.0)),
    "softmax": (lambda: [P(2, 5)], lambda a: T.softmax(a, axis=-1)),
    "layer_norm": (lambda: [P(3, 6), P(6, seed=1), P(6, seed=2)], lambda a, g, b: T.layer_norm(a, g, b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    make, fn = OPS[name]
    params = make()
    errs = check_gradients(lambda: scalarize(fn(*params)), params)
    assert max(errs) < 1e-4, (name, errs)


def test_mlp_gradients():
    rng = np.random.default_rng(0)
    mlp = nn.MLP([5, 7, 6, 3], rng)
    x = rng.normal(size=(4, 5))
    errs = check_gradients(lambda: scalarize(mlp(x)), mlp.parameters())
    assert max(errs) < 1e-4


@pytest.mark.parametrize("block", ["encoder", "decoder", "cross"])
def test_attention_block_gradients(block):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 8))
    mem = rng.normal(size=(2, 3, 8))
    if block == "encoder":
        mod = nn.EncoderBlock(8, 2, rng)
        fn = lambda: scalarize(mod(x))  # noqa: E731
    elif block == "decoder":
        mod = nn.DecoderBlock(8, 2, rng)
        fn = lambda: scalarize(mod(x, mem))  # noqa: E731
    else:
        mod = nn.CrossAttentionUnit(8, 2, rng)
        fn = lambda: scalarize(mod(x, mem))  # noqa: E731
    assert max(check_gradients(fn, mod.parameters(), max_entries=12)) < 1e-4


def test_sum_grad_is_ones():
    x = P(3, 4)
    with Tape() as tape:
        loss = T.sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_product_rule():
    x, y = nn.param(np.array(3.0)), nn.param(np.array(-2.5))
    with Tape() as tape:
        loss = T.mul(x, y)
    tape.backward(loss)
    assert x.grad == -2.5 and y.grad == 3.0


def test_shared_use_accumulates():
    x = nn.param(np.array([2.0]))
    with Tape() as tape:
        loss = T.sum(T.add(T.mul(x, x), x))
    tape.backward(loss)
    assert x.grad[0] == 5.0


def test_backward_errors():
    x = P(3)
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(NotScalar):
        tape.backward(y)
    with pytest.raises(DetachedNode):
        Tape().backward(T.sum(y))


def test_no_recording_outside_tape():
    x = P(3)
    y = T.mul(x, 2.0)
    assert y._tape is None and not y.tracked


def test_broadcast_restriction():
    with pytest.raises(ShapeMismatch):
        T.add(np.zeros((2, 1, 4)), np.zeros((2, 3, 4)))
    assert T.add(np.zeros((2, 3, 4)), np.zeros(4)).shape == (2, 3, 4)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_array_equal(T.matmul(a, np.eye(4)).data, a)


def test_softmax_uniform():
    for n in (1, 3, 10):
        np.testing.assert_allclose(T.softmax(np.full(n, 2.7)).data, np.full(n, 1 / n), rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(x, c):
    s = T.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(s >= 0)
    np.testing.assert_allclose(T.softmax(x + c).data, s, rtol=1e-9, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 8), elements=st.floats(-100, 100)))
def test_layer_norm_properties(x):
    if np.any(np.ptp(x, axis=-1) < 1e-3):
        return
    y = T.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-9)


def test_logcosh_values():
    assert T.logcosh(np.array(0.0)).data == 0.0
    assert float(T.logcosh(np.array(50.0)).data) == pytest.approx(50 - math.log(2), rel=1e-15)
    assert np.isfinite(T.logcosh(np.array(1e4)).data)


def _attention_reference(q, k, v, heads):
    b, tq, d = q.shape
    dh = d // heads
    out = np.zeros((b, tq, d))
    for n in range(b):
        for h in range(heads):
            cols = slice(h * dh, (h + 1) * dh)
            for i in range(tq):
                scores = [float(np.dot(q[n, i, cols], k[n, j, cols])) / math.sqrt(dh) for j in range(k.shape[1])]
                m = max(scores)
                w = [math.exp(s - m) for s in scores]
                z = sum(w)
                for j in range(k.shape[1]):
                    out[n, i, cols] += (w[j] / z) * v[n, j, cols]
    return out


def test_attention_matches_two_loop_reference():
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))
    got = nn.scaled_dot_attention(q, k, v, heads=2).data
    np.testing.assert_allclose(got, _attention_reference(q, k, v, 2), rtol=0, atol=1e-12)


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(4)
    q, k, v = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 1, 4)), rng.normal(size=(1, 1, 4))
    out = nn.scaled_dot_attention(q, k, v, heads=2).data
    np.testing.assert_allclose(out, np.broadcast_to(v, out.shape), rtol=1e-15)


def test_attention_key_permutation_invariance():
    rng = np.random.default_rng(5)
    q, k, v = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 6, 4)), rng.normal(size=(1, 6, 4))
    perm = rng.permutation(6)
    a = nn.scaled_dot_attention(q, k, v, 2).data
    b = nn.scaled_dot_attention(q, k[:, perm], v[:, perm], 2).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = P(3)
    before = p.data.copy()
    st_ = AdamState.for_params([p])
    for _ in range(5):
        p.grad = np.zeros(3)
        adam_step([p], st_)
    np.testing.assert_array_equal(p.data, before)


def test_adam_constant_gradient_step_size():
    p = nn.param(np.zeros(2))
    st_ = AdamState.for_params([p], lr=0.01)
    for _ in range(200):
        prev = p.data.copy()
        p.grad = np.array([3.0, -0.5])
        adam_step([p], st_)
    np.testing.assert_allclose(p.data - prev, [-0.01, 0.01], rtol=1e-6)


def test_adam_hand_step():
    p = nn.param(np.array([1.0, -2.0]))
    st_ = AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, step=1,
                    m=[np.array([0.5, -0.1])], v=[np.array([0.04, 0.01])])
    g = np.array([0.3, 0.2])
    p.grad = g
    adam_step([p], st_)
    m = 0.9 * np.array([0.5, -0.1]) + 0.1 * g
    v = 0.999 * np.array([0.04, 0.01]) + 0.001 * g * g
    mhat, vhat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected = np.array([1.0, -2.0]) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-12)


def test_adam_missing_grad():
    p = P(2)
    with pytest.raises(MissingGrad):
        adam_step([p], AdamState.for_params([p]))


def test_checkpoint_round_trip(tmp_path):
    tensors = {"b.w": np.random.default_rng(0).normal(size=(3, 4)), "a": np.arange(5.0)}
    save_checkpoint(tmp_path / "c.enc", tensors, {"lr": 4e-4, "dims": [1, 2]})
    back, header = load_checkpoint(tmp_path / "c.enc")
    assert header == {"lr": 4e-4, "dims": [1, 2]}
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert dumps_checkpoint(tensors, {"x": 1}) == dumps_checkpoint(dict(reversed(tensors.items())), {"x": 1})


@pytest.mark.parametrize("mangle", [
    lambda b: b[:-8],
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:20],
    lambda b: b"",
])
def test_bad_checkpoint(mangle):
    blob = dumps_checkpoint({"w": np.ones((2, 2))}, {})
    assert blob.startswith(MAGIC)
    with pytest.raises(BadCheckpoint):
        loads_checkpoint(mangle(blob))


def test_relative_error_floor():
    assert relative_error(np.array([1e-12]), np.array([0.0])) < 1e-4
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_tensor_float64():
    assert Tensor([1, 2, 3]).data.dtype == np.float64
