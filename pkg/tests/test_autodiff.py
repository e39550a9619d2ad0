import numpy as np
import numpy.testing as npt
import pytest

from xunit import models
from xunit.autodiff import PRIMITIVES, Param, ParamStore, Tape, backward, grad_check
from xunit.errors import ContractError, DimensionError, GraphError

TOL = 1e-4


def away_from_kink(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.normal(size=bad.sum())
    return x


def weighted_sum(tape, vid, weights):
    """Scalar readout with non-uniform weights, so no gradient vanishes by symmetry."""
    return tape.record("sum", [tape.record("mul", [vid, tape.constant(weights)])])


def check_input(op, arrays, position, rng, **attrs):
    """grad_check of ``op`` with respect to ``arrays[position]``."""
    out_shape = PRIMITIVES[op].forward(*arrays, **attrs)[0].shape
    weights = rng.normal(size=out_shape)

    def f(tape, xid):
        ids = [xid if i == position else tape.constant(a) for i, a in enumerate(arrays)]
        out = tape.record(op, ids, **attrs)
        if tape[out].ndim == 0:
            return out
        return weighted_sum(tape, out, weights)

    return grad_check(f, arrays[position])


def test_hadamard_with_ones_passes_gradient_through(rng):
    tape = Tape()
    x = tape.variable(rng.normal(size=(1, 2, 3, 3)))
    out = tape.record("mul", [x, tape.constant(np.ones((1, 2, 3, 3)))])
    seed = rng.normal(size=(1, 2, 3, 3))
    npt.assert_array_equal(backward(tape, out, seed)[x], seed)


def test_sub_self_has_zero_gradient(rng):
    tape = Tape()
    x = tape.variable(rng.normal(size=(1, 1, 2, 2)))
    out = tape.record("sub", [x, x])
    npt.assert_array_equal(backward(tape, out, np.ones((1, 1, 2, 2)))[x], 0)


def test_fan_out_accumulates(rng):
    tape = Tape()
    x = tape.variable(rng.normal(size=(1, 1, 2, 3)))
    y = tape.record("add", [x, x])
    seed = rng.normal(size=(1, 1, 2, 3))
    npt.assert_array_equal(backward(tape, y, seed)[x], 2 * seed)


def test_mse_derivative(rng):
    x = rng.normal(size=(2, 1, 3, 3))
    c = rng.normal(size=(2, 1, 3, 3))
    tape = Tape()
    xid = tape.variable(x)
    root = tape.record("mse", [xid, tape.constant(c)])
    npt.assert_allclose(backward(tape, root)[xid], 2 * (x - c) / x.size, rtol=1e-15)


def test_gaussian_gradient_closed_form(rng):
    d = rng.normal(size=(1, 2, 4, 4))
    up = rng.normal(size=d.shape)
    tape = Tape()
    did = tape.variable(d)
    out = tape.record("gaussian", [did])
    npt.assert_allclose(backward(tape, out, up)[did], -2 * d * np.exp(-d ** 2) * up, atol=1e-12)


def test_sum_relu_grad_check(rng):
    x = away_from_kink(rng, (1, 2, 4, 4))
    f = lambda tape, xid: tape.record("sum", [tape.record("relu", [xid])])
    assert grad_check(f, x) < 1e-6


def test_sum_hadamard_square(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    f = lambda tape, xid: tape.record("sum", [tape.record("mul", [xid, xid])])
    tape = Tape()
    xid = tape.variable(x)
    npt.assert_allclose(backward(tape, f(tape, xid))[xid], 2 * x)
    assert grad_check(f, x) < 1e-8


def test_mse_grad_check(rng):
    target = rng.normal(size=(1, 1, 4, 4))
    f = lambda tape, xid: tape.record("mse", [xid, tape.constant(target)])
    assert grad_check(f, rng.normal(size=(1, 1, 4, 4))) < 1e-8


@pytest.mark.parametrize("case", [
    ("add", 2, {}), ("sub", 2, {}), ("mul", 2, {}), ("scale", 1, {"factor": -1.7}),
    ("relu", 1, {}), ("gaussian", 1, {}),
])
def test_elementwise_primitives(case, rng):
    op, arity, attrs = case
    arrays = [away_from_kink(rng, (2, 2, 3, 3)) for _ in range(arity)]
    for pos in range(arity):
        assert check_input(op, arrays, pos, rng, **attrs) < TOL


@pytest.mark.parametrize("with_bias", [False, True])
def test_conv2d_gradients(with_bias, rng):
    arrays = [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3))]
    if with_bias:
        arrays.append(rng.normal(size=2))
    for pos in range(len(arrays)):
        assert check_input("conv2d", arrays, pos, rng, pad=1) < TOL


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_depthwise_gradients(method, rng):
    arrays = [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(3, 5, 5))]
    for pos in range(2):
        assert check_input("depthwise_conv2d", arrays, pos, rng, pad=2, method=method) < TOL


def test_batchnorm_train_gradients(rng):
    arrays = [rng.normal(size=(2, 3, 4, 4)) * 2 + 1, rng.normal(size=3), rng.normal(size=3)]
    for pos in range(3):
        assert check_input("batchnorm_train", arrays, pos, rng, eps=1e-5) < TOL


def test_batchnorm_eval_gradients(rng):
    arrays = [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3), rng.normal(size=3)]
    attrs = dict(mean=rng.normal(size=3), var=rng.uniform(0.5, 2, size=3), eps=1e-5)
    for pos in range(3):
        assert check_input("batchnorm_eval", arrays, pos, rng, **attrs) < TOL


def test_grad_check_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        grad_check(lambda tape, xid: tape.record("relu", [xid]), rng.normal(size=(1, 1, 2, 2)))
    with pytest.raises(ContractError):
        grad_check(lambda tape, xid: xid, np.zeros(()), epsilon=0)


def test_grad_check_detects_wrong_backward(monkeypatch, rng):
    prim = PRIMITIVES["gaussian"]
    monkeypatch.setitem(PRIMITIVES, "gaussian", type(prim)(
        "gaussian", prim.forward, lambda g, inputs, out, saved, needs: (2 * inputs[0] * out * g,)))
    f = lambda tape, xid: tape.record("sum", [tape.record("gaussian", [xid])])
    assert grad_check(f, rng.normal(size=(1, 1, 3, 3))) > 1.0


def test_grad_check_subsample(rng):
    f = lambda tape, xid: tape.record("sum", [tape.record("mul", [xid, xid])])
    assert grad_check(f, rng.normal(size=(1, 2, 10, 10)), samples=100, seed=3) < 1e-6


def test_unknown_value_id():
    tape = Tape()
    tape.variable(np.zeros((1, 1, 1, 1)))
    with pytest.raises(GraphError):
        tape.record("relu", [5])
    with pytest.raises(GraphError):
        tape.record("no-such-op", [0])


def test_seed_shape_mismatch(rng):
    tape = Tape()
    x = tape.variable(rng.normal(size=(1, 1, 2, 2)))
    y = tape.record("relu", [x])
    with pytest.raises(DimensionError):
        backward(tape, y, np.ones((1, 1, 2, 3)))
    with pytest.raises(ContractError):
        backward(tape, y)


def tiny_net_loss(rng):
    spec = models.build_xnet(2, width=4, kernel=3, xkernel=3)
    params = models.init_params(spec, seed=1, dtype=np.float64)
    x = rng.normal(size=(2, 1, 8, 8))
    target = rng.normal(size=(2, 1, 8, 8)) * 0.1
    tape, out = models.forward(spec, params, x, train=True)
    root = tape.record("mse", [out, tape.constant(target)])
    return tape, root, params


def test_topological_order_and_replay_bit_exact(rng):
    tape, root, _ = tiny_net_loss(rng)
    for rec in tape.records:
        assert all(i < rec.output for i in rec.inputs)
    replayed = tape.replay()
    for vid, value in replayed.items():
        assert np.array_equal(value, tape[vid])


def test_backward_is_deterministic(rng):
    tape, root, params = tiny_net_loss(rng)
    backward(tape, root)
    first = {p.name: p.grad.copy() for p in params}
    params.zero_grad()
    backward(tape, root)
    for p in params:
        assert np.array_equal(p.grad, first[p.name])


def test_param_leaves_accumulate():
    p = Param("w", np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    tape = Tape()
    a, b = tape.param(p), tape.param(p)
    backward(tape, tape.record("sum", [tape.record("mul", [a, b])]))
    npt.assert_array_equal(p.grad.ravel(), [2.0, 4.0])


def test_param_store_contract():
    store = ParamStore()
    store.add("a", np.zeros(3))
    store.add("buf", np.ones(2), trainable=False)
    store.add("b", np.zeros((2, 2)))
    assert store.names() == ["a", "buf", "b"]
    assert store.num_trainable() == 7
    assert all(p.grad.shape == p.value.shape for p in store)
    with pytest.raises(ValueError):
        store.add("a", np.zeros(1))
    with pytest.raises(DimensionError):
        Param("x", np.zeros(3), grad=np.zeros(2))
