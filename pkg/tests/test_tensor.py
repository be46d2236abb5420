"""Tensor engine: forward values, gradients against finite differences, optimizer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neurocell import tensor as T
from neurocell.errors import ContractError, DimensionError
from neurocell.gradcheck import check
from neurocell.netgraph import build_unet, derive_rng, forward_pass
from neurocell.tensor import Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------


def test_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_reuse_accumulates():
    x = leaf([1.0, -2.0, 3.0])
    T.backward(T.tsum(x + x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_tape_is_topological():
    a, b = leaf([1.0]), leaf([2.0])
    c = a * b
    d = c + a
    loss = T.tsum(d * c)
    order = T.tape(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]
    assert len({id(t) for t in order}) == len(order)


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        T.backward(x * x)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = x * x
    assert not y.requires_grad
    assert y._parents == ()


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        Tensor(np.zeros(2)).item()


def test_grads_finite_and_shaped(rng):
    x = leaf(rng.standard_normal((2, 3, 6, 6)))
    w = leaf(rng.standard_normal((4, 3, 3, 3)))
    loss = T.tsum(T.sigmoid(T.conv2d(x, w, None, 1, 1)))
    T.backward(loss)
    for t in (x, w):
        assert t.grad.shape == t.shape
        assert np.isfinite(t.grad).all()


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_conv2d_direct_sum():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    out = T.conv2d(x, w, Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, [[[5.0]]])


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 5, 7)))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_matches_loops(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_transpose_scatter():
    out = T.conv_transpose2d(Tensor(np.array([[[5.0]]])), Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]])), None, 1)
    np.testing.assert_array_equal(out.data, [[[5.0, 0.0], [0.0, 5.0]]])


def test_conv_transpose_identity(rng):
    x = Tensor(rng.standard_normal((1, 4, 4)))
    out = T.conv_transpose2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_transpose_is_adjoint(rng, stride):
    # <conv(x), y> == <x, conv_t(y)> for the same kernel
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((4, 3, 2, 2))
    y_shape = T.conv2d(Tensor(x), Tensor(w), None, stride, 0).shape
    y = rng.standard_normal(y_shape)
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), None, stride, 0).data * y)
    rhs = np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(w), None, stride).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_values():
    out = T.maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2)
    np.testing.assert_array_equal(out.data, [[[4.0]]])


def test_maxpool_constant():
    out = T.maxpool2d(Tensor(np.full((2, 4, 6), 3.5)), 2)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 3), 3.5))


def test_maxpool_tie_goes_to_first():
    x = leaf(np.ones((1, 2, 2)))
    T.backward(T.tsum(T.maxpool2d(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_dense_examples():
    x = Tensor(np.array([2.0, 3.0]))
    np.testing.assert_array_equal(T.dense(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, [2.0, 3.0])
    np.testing.assert_array_equal(T.dense(x, Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([1.0]))).data, [6.0])


def test_activation_examples():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_batchnorm_train_normalizes(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    state = T.BatchNormState.fresh(3, np.float64)
    out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, "train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_constant_channel_gives_beta():
    x = Tensor(np.full((2, 2, 3, 3), 7.0))
    beta = np.array([0.25, -1.5])
    out = T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(beta), T.BatchNormState.fresh(2, np.float64), "train")
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], out.shape), atol=1e-6)


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.standard_normal((4, 2, 3, 3))
    state = T.BatchNormState.fresh(2, np.float64)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train")
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "eval").data
    ref = (x - state.mean[None, :, None, None]) / np.sqrt(state.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref)


def test_cross_entropy_examples():
    loss = T.cross_entropy(Tensor(np.full((1, 4, 4), 0.5)), np.ones((1, 4, 4)), "pixelwise_binary")
    assert loss.item() == pytest.approx(np.log(2), abs=1e-12)
    cat = T.cross_entropy(Tensor(np.array([[1.0, 0.0, 0.0]])), np.array([0]), "categorical")
    assert cat.item() == pytest.approx(0.0, abs=1e-9)
    clamped = T.cross_entropy(Tensor(np.array([[0.0, 1.0, 0.0]])), np.array([0]), "categorical")
    assert np.isfinite(clamped.item())


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

GRAD_CASES = {
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, 1, 1), [(2, 8, 8), (4, 2, 3, 3), (4,)]),
    "conv2d_stride2_pad1": (lambda x, w, b: T.conv2d(x, w, b, 2, 1), [(2, 7, 7), (3, 2, 3, 3), (3,)]),
    "conv_transpose2d": (lambda x, w, b: T.conv_transpose2d(x, w, b, 2), [(2, 3, 3), (2, 3, 2, 2), (3,)]),
    "maxpool2d": (lambda x: T.maxpool2d(x, 2), [(1, 4, 4)]),
    "avgpool2d": (lambda x: T.avgpool2d(x, 3, 1, 1), [(2, 2, 5, 5)]),
    "global_avg_pool": (T.global_avg_pool, [(2, 3, 4, 4)]),
    "dense": (T.dense, [(5,), (3, 5), (3,)]),
    "dense_batched": (T.dense, [(4, 5), (3, 5), (3,)]),
    "relu": (T.relu, [(3, 7)]),
    "sigmoid": (T.sigmoid, [(3, 7)]),
    "softmax": (T.softmax, [(4, 3)]),
    "concat": (lambda a, b: T.concat([a, b], 1), [(2, 2, 3, 3), (2, 1, 3, 3)]),
    "broadcast_mul_add": (lambda a, b: (a + b) * a, [(3, 4), (4,)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name, rng):
    fn, shapes = GRAD_CASES[name]
    inputs = [leaf(rng.standard_normal(s)) for s in shapes]
    assert check(fn, inputs, rng) <= 1e-4


def test_conv2d_sum_gradient(rng):
    x, w, b = leaf(rng.standard_normal((2, 8, 8))), leaf(rng.standard_normal((4, 2, 3, 3))), leaf(np.zeros(4))
    T.backward(T.tsum(T.conv2d(x, w, b, 1, 1)))
    for t in (x, w):
        numeric = T.finite_difference_grad(lambda _: T.tsum(T.conv2d(x, w, b, 1, 1)), t)
        assert T.relative_error(t.grad, numeric) <= 1e-4


def test_batchnorm_gradient(rng):
    state = T.BatchNormState.fresh(3, np.float64)
    inputs = [leaf(rng.standard_normal((2, 3, 4, 4))), leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.standard_normal(3))]
    assert check(lambda x, g, b: T.batchnorm2d(x, g, b, state, "train"), inputs, rng) <= 1e-3


def test_sigmoid_loss_gradient(rng):
    z = leaf(rng.standard_normal((1, 6, 6)))
    target = rng.uniform(0, 1, (1, 6, 6))
    assert check(lambda z: T.cross_entropy(T.sigmoid(z), target, "pixelwise_binary"), [z], rng) <= 1e-4


def test_softmax_categorical_gradient(rng):
    z = leaf(rng.standard_normal((5, 3)))
    labels = rng.integers(0, 3, 5)
    assert check(lambda z: T.cross_entropy(T.softmax(z), labels, "categorical"), [z], rng) <= 1e-4


@pytest.mark.slow
def test_unet_every_parameter(rng):
    spec = build_unet(2, 4, 1, 1, rng=derive_rng(5, "unet-fd"), dtype=np.float64)
    x = rng.standard_normal((1, 1, 16, 16))
    target = (rng.uniform(size=(1, 1, 16, 16)) > 0.5).astype(np.float64)

    def loss(*_):
        return T.cross_entropy(forward_pass(spec, x, "train"), target, "pixelwise_binary")

    stats = {}
    assert check(loss, spec.parameters(), rng, probes=None, stats=stats) <= 1e-3
    assert stats.get("kinks", 0) < 0.01 * spec.parameter_count()


# ---------------------------------------------------------------------------
# optimizer and finite differences
# ---------------------------------------------------------------------------


def test_sgd_single_step():
    p = leaf([1.0])
    p.grad = np.array([1.0])
    T.optimizer_step([p], T.OptimizerState(0.1, 0.0))
    assert p.data[0] == pytest.approx(0.9)


def test_zero_grad_leaves_param():
    p = leaf([2.5])
    p.grad = np.zeros(1)
    T.optimizer_step([p], T.OptimizerState(0.1, 0.9))
    assert p.data[0] == 2.5


def test_sgd_converges_on_square():
    p = leaf([3.0])
    state = T.OptimizerState(0.1, 0.9)
    for _ in range(200):
        T.backward(T.tsum(p * p))
        T.optimizer_step([p], state)
    assert abs(p.data[0]) < 1e-3


def test_optimizer_rejects_missing_grad():
    with pytest.raises(ContractError):
        T.optimizer_step([leaf([1.0])], T.OptimizerState())


def test_finite_difference_examples():
    x = leaf([3.0])
    assert T.finite_difference_grad(lambda t: T.tsum(t * t), x)[0] == pytest.approx(6.0, abs=1e-6)
    y = leaf(np.ones(4))
    np.testing.assert_array_equal(T.finite_difference_grad(lambda t: Tensor(np.array(2.0)), y), np.zeros(4))
