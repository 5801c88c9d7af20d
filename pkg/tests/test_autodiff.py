import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialsep.autodiff import (Adam, BatchNormState, Parameter, PlateauHalver, Tape, Tensor,
                                 check_gradients, clip_grad_norm, load_checkpoint, ops,
                                 relative_error, save_checkpoint)
from spatialsep.errors import DataError, NumericalError

TOL = 1e-4


def _param(name, shape, seed, scale=1.0):
    return Parameter(name, np.random.default_rng(seed).standard_normal(shape) * scale)


def _weights(shape, seed=99):
    # Random projection so every output element contributes to the scalar loss.
    return np.random.default_rng(seed).standard_normal(shape)


def _check(loss_fn, params):
    errs = check_gradients(loss_fn, params)
    assert max(errs.values()) < TOL, errs


UNARY = {
    "square": lambda x: ops.square(x),
    "sqrt": lambda x: ops.sqrt(ops.add(ops.square(x), 1.0)),
    "log10": lambda x: ops.log10(ops.add(ops.square(x), 0.5)),
    "relu": lambda x: ops.relu(x),
    "sigmoid": lambda x: ops.sigmoid(x),
    "reshape": lambda x: ops.reshape(x, (4, 3)),
    "transpose": lambda x: ops.transpose(x, (1, 0)),
    "getitem": lambda x: ops.getitem(x, (slice(1, 3), slice(None, None, 2))),
    "fancy_getitem": lambda x: ops.getitem(x, (np.array([0, 2, 2]), np.array([1, 0, 3]))),
    "pad_last": lambda x: ops.pad_last(x, 2, 1),
    "mean": lambda x: ops.mean(x, axis=1, keepdims=True),
    "sum": lambda x: ops.sum(x, axis=0),
    "clamp_min": lambda x: ops.clamp_min(x, -0.3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    x = _param("x", (3, 4), seed=1)
    # Keep relu / clamp away from their kinks.
    x.value[np.abs(x.value) < 1e-2] += 0.1
    x.value[np.abs(x.value + 0.3) < 1e-2] += 0.1
    fn = UNARY[name]
    w = _weights(fn(Tensor(x.value)).shape)
    _check(lambda: ops.sum(ops.mul(fn(x), w)), [x])


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "prelu", "dot", "concat", "stack"])
def test_binary_primitive_gradients(name):
    a = _param("a", (3, 4), seed=2)
    b = _param("b", (3, 4), seed=3)
    if name == "div":
        b.value = np.abs(b.value) + 0.5
    if name == "prelu":
        b = _param("alpha", (3, 1), seed=4)
    fns = {
        "add": lambda: ops.add(a, b), "sub": lambda: ops.sub(a, b), "mul": lambda: ops.mul(a, b),
        "div": lambda: ops.div(a, b), "prelu": lambda: ops.prelu(a, b),
        "dot": lambda: ops.dot(a, b), "concat": lambda: ops.concat([a, b], axis=1),
        "stack": lambda: ops.stack([a, b], axis=1),
    }
    fn = fns[name]
    w = _weights(fn().shape)
    _check(lambda: ops.sum(ops.mul(fn(), w)), [a, b])


def test_broadcast_gradients():
    a = _param("a", (2, 3, 4), seed=5)
    b = _param("b", (3, 1), seed=6)
    w = _weights((2, 3, 4))
    _check(lambda: ops.sum(ops.mul(ops.mul(a, b), w)), [a, b])


@pytest.mark.parametrize("stride,dilation,groups", [(1, 1, 1), (2, 1, 1), (1, 3, 1), (1, 2, 4), (3, 2, 1)])
def test_conv1d_gradients(stride, dilation, groups):
    x = _param("x", (2, 4, 23), seed=7)
    w = _param("w", (4, 4 // groups, 3), seed=8)
    out_shape = ops.conv1d(Tensor(x.value), w.value, stride, dilation, groups).shape
    proj = _weights(out_shape)
    _check(lambda: ops.sum(ops.mul(ops.conv1d(x, w, stride, dilation, groups), proj)), [x, w])


def test_conv1d_partial_grouping_rejected():
    with pytest.raises(DataError, match="grouping"):
        ops.conv1d(Tensor(np.zeros((1, 4, 10))), np.zeros((4, 2, 3)), groups=2)


def test_conv1d_pointwise_gradients():
    x = _param("x", (2, 5, 9), seed=9)
    w = _param("w", (3, 5, 1), seed=10)
    proj = _weights((2, 3, 9))
    _check(lambda: ops.sum(ops.mul(ops.conv1d(x, w), proj)), [x, w])


@pytest.mark.parametrize("stride,dilation", [((1, 1), (1, 1)), ((1, 3), (3, 1)), ((2, 2), (1, 1)),
                                             ((1, 1), (2, 2)), ((2, 1), (1, 3))])
def test_conv2d_gradients(stride, dilation):
    x = _param("x", (2, 6, 30), seed=11)
    k = _param("k", (3, 2, 5), seed=12)
    out_shape = ops.conv2d(Tensor(x.value), k.value, stride, dilation).shape
    proj = _weights(out_shape)
    _check(lambda: ops.sum(ops.mul(ops.conv2d(x, k, stride, dilation), proj)), [x, k])


def test_transposed_conv_gradients():
    x = _param("x", (2, 5, 6), seed=13)
    basis = _param("basis", (5, 8), seed=14)
    proj = _weights((2, 5 * 4 + 8))
    _check(lambda: ops.sum(ops.mul(ops.transposed_conv1d(x, basis, 4), proj)), [x, basis])


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    x = _param("x", (3, 4, 7), seed=15)
    gamma = _param("gamma", (4,), seed=16)
    beta = _param("beta", (4,), seed=17)
    state = BatchNormState(4)
    state.running_mean = np.random.default_rng(1).standard_normal(4)
    state.running_var = np.random.default_rng(2).uniform(0.5, 2.0, 4)
    proj = _weights((3, 4, 7))
    _check(lambda: ops.sum(ops.mul(ops.batch_norm(x, gamma, beta, state, training), proj)),
           [x, gamma, beta])


def test_batch_norm_running_stats_and_inference():
    state = BatchNormState(2, momentum=0.9)
    x = np.random.default_rng(0).standard_normal((4, 2, 10)) * 3 + 1
    out = ops.batch_norm(Tensor(x), np.ones(2), np.zeros(2), state, training=True)
    np.testing.assert_allclose(out.value.mean(axis=(0, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)))
    # Inference uses running stats and is the same per item as for the batch.
    full = ops.batch_norm(Tensor(x), np.ones(2), np.zeros(2), state, training=False).value
    one = ops.batch_norm(Tensor(x[1:2]), np.ones(2), np.zeros(2), state, training=False).value
    np.testing.assert_array_equal(full[1:2], one)


def test_backward_linearity_over_batch():
    w = _param("w", (3, 2, 4), seed=18)
    x = np.random.default_rng(19).standard_normal((3, 2, 20))

    def grad_of(batch):
        w.zero_grad()
        with Tape() as tape:
            loss = ops.sum(ops.square(ops.conv1d(Tensor(batch), w)))
        tape.backward(loss)
        return w.grad.copy()

    total = grad_of(x)
    parts = sum(grad_of(x[i:i + 1]) for i in range(3))
    np.testing.assert_allclose(total, parts, atol=1e-10)


def test_replay_is_bitwise_deterministic():
    w = _param("w", (4, 3, 5), seed=20)
    x = np.random.default_rng(21).standard_normal((2, 3, 40))
    grads = []
    for _ in range(2):
        w.zero_grad()
        with Tape() as tape:
            loss = ops.mean(ops.sigmoid(ops.conv1d(Tensor(x), w, stride=2)))
        tape.backward(loss)
        grads.append(w.grad.copy())
    assert grads[0].tobytes() == grads[1].tobytes()


def test_tape_errors():
    p = Parameter("p", [1.0, 2.0])
    with Tape() as tape:
        vec = ops.mul(p, 2.0)
        loss = ops.sum(vec)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(vec)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(loss)
    with pytest.raises(RuntimeError, match="without a recorded forward"):
        Tape().backward(loss)


def test_non_finite_forward_raises():
    with pytest.raises(NumericalError, match="log10"):
        with Tape():
            ops.log10(Parameter("z", [0.0, 1.0]))


def test_gradient_accumulates_into_shared_parameter():
    p = Parameter("p", [3.0])
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(p, p), ops.mul(p, 5.0)))
    tape.backward(loss)
    np.testing.assert_allclose(p.grad, [11.0])


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_adam_matches_hand_computation():
    p = Parameter("p", [1.0, -2.0])
    opt = Adam(lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.4])
    m = v = np.zeros(2)
    value = p.value.copy()
    for t, g in enumerate([g1, g2], start=1):
        p.grad = g.copy()
        opt.step([p])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g ** 2
        value = value - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.value, value, rtol=1e-14)
    assert np.all(p.grad == 0)


def test_adam_skips_frozen_parameters():
    frozen = Parameter("f", [-1.0, -1.0], trainable=False)
    frozen.grad = np.ones(2)
    Adam().step([frozen])
    np.testing.assert_array_equal(frozen.value, [-1.0, -1.0])


def test_clip_grad_norm():
    a, b = Parameter("a", [0.0, 0.0]), Parameter("b", [0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 5.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [3.0, 0.0])
    a.grad, b.grad = np.array([30.0, 0.0]), np.array([40.0])
    assert clip_grad_norm([a, b], 5.0) == pytest.approx(50.0)
    np.testing.assert_allclose(np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)), 5.0)


def test_plateau_halver():
    opt = Adam(lr=1.0)
    sched = PlateauHalver(opt, patience=3)
    for score in [1.0, 2.0, 1.5, 1.9]:
        assert not sched.update(score)
    assert opt.lr == 1.0
    assert sched.update(0.0)
    assert opt.lr == 0.5
    state = sched.state()
    other = PlateauHalver(Adam(), patience=3)
    other.load_state(state)
    assert other.best == 2.0 and other.bad_evals == 0


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 4))}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays, {"note": "hi", "step": 3})
    back, header = load_checkpoint(path)
    assert header == {"note": "hi", "step": 3}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].shape == arrays[k].shape
    raw = path.read_bytes()
    assert raw[:8] == b"SPSEPCKP"
    assert int.from_bytes(raw[8:12], "little") == 1


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense" * 4)
    with pytest.raises(DataError):
        load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, {"a": np.ones(100)}, {})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(good)


@settings(max_examples=25, deadline=None)
@given(shape=st.tuples(st.integers(1, 3), st.integers(1, 4)), seed=st.integers(0, 2**16))
def test_sum_of_squares_gradient_property(shape, seed):
    p = Parameter("p", np.random.default_rng(seed).standard_normal(shape))
    with Tape() as tape:
        loss = ops.sum(ops.square(p))
    tape.backward(loss)
    np.testing.assert_allclose(p.grad, 2 * p.value, rtol=1e-15)
