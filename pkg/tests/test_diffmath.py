import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrfuse import diffmath as dm
from corrfuse.diffmath import Tensor

NEG = -np.inf


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def worst(report):
    return max(report.values())


# -- forward examples -----------------------------------------------------------

def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ b).data, b.data)


def test_matmul_row_times_column():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dm.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_masked_softmax_uniform():
    out = dm.masked_softmax(Tensor([0.0, 0.0, 0.0]), np.zeros(3))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_masked_softmax_masked_slot_is_exactly_zero():
    out = dm.masked_softmax(Tensor([5.0, 2.0, 9.0]), np.array([0.0, 0.0, NEG]))
    assert out.data[2] == 0.0
    e = np.array([math.exp(5.0), math.exp(2.0)])
    np.testing.assert_allclose(out.data[:2], e / e.sum(), rtol=1e-14)


def test_masked_softmax_closed_form():
    out = dm.masked_softmax(Tensor([math.log(2.0), 0.0]), np.zeros(2))
    np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], rtol=1e-14)


def test_masked_softmax_rejects_fully_masked_slice():
    with pytest.raises(dm.InvalidMaskError):
        dm.masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0, NEG], [NEG, NEG]]))


def test_masked_softmax_large_logits_stay_finite():
    out = dm.masked_softmax(Tensor([1000.0, 999.0, -1e6]), np.array([0.0, 0.0, NEG]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data[:2], [1 / (1 + math.exp(-1)), 1 / (1 + math.e)], rtol=1e-12)


def test_leaky_relu_examples():
    assert dm.leaky_relu(Tensor(3.0), 0.2).item() == 3.0
    assert dm.leaky_relu(Tensor(-5.0), 0.2).item() == pytest.approx(-1.0, abs=1e-15)


def test_leaky_relu_subgradient_at_zero_is_slope():
    x = Tensor(np.zeros(3), requires_grad=True)
    dm.leaky_relu(x, 0.2).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.2, 0.2, 0.2])


def test_sigmoid_and_concat():
    assert dm.sigmoid(Tensor(0.0)).item() == 0.5
    assert dm.concat([Tensor([1.0]), Tensor([2.0, 3.0])]).data.tolist() == [1.0, 2.0, 3.0]


def test_sigmoid_is_stable_at_extremes():
    out = dm.sigmoid(Tensor([-800.0, 800.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_shared_parameter_gradients_accumulate():
    w = Tensor([2.0], requires_grad=True)
    (w * w + w * 3.0).sum().backward()
    assert w.grad.tolist() == [7.0]


def test_backward_populates_every_reachable_leaf(rng):
    a, b, c = param(rng, 2, 3), param(rng, 3, 2), param(rng, 2)
    unused = param(rng, 2)
    ((a @ b) + c).sum().backward()
    for t in (a, b, c):
        assert t.grad is not None and t.grad.shape == t.shape
    assert unused.grad is None


def test_tape_replays_each_node_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    z = y + y                          # diamond: y reached along two edges
    out = z.sum()
    tape = dm.Tape.record(out)
    assert len(tape) == len({id(n) for n in tape.nodes})
    out.backward()
    assert x.grad.tolist() == [4.0, 4.0]


def test_backward_twice_accumulates(rng):
    x = param(rng, 3)
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first)


# -- gradient checks --------------------------------------------------------------

UNARY = {
    "neg": dm.neg,
    "exp": dm.exp,
    "tanh": dm.tanh,
    "sigmoid": dm.sigmoid,
    "softmax": lambda x: dm.softmax(x, axis=-1),
    "sum_axis0": lambda x: dm.reduce_sum(x, axis=0),
    "mean_axis1": lambda x: dm.reduce_mean(x, axis=1, keepdims=True),
    "transpose": dm.swap_last,
    "reshape": lambda x: dm.reshape(x, (6,)),
    "take": lambda x: dm.take(x, np.array([0, 1, 1])),
    "getitem": lambda x: x[:, 1:],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name, rng):
    x = param(rng, 2, 3)
    weights = rng.standard_normal(UNARY[name](x).shape)
    fn = lambda: (UNARY[name](x) * weights).sum()  # noqa: E731
    assert worst(dm.check_gradients(fn, [x])) < 1e-6


def test_log_gradient(rng):
    x = param(rng, 2, 3, low=0.5, high=2.0)
    assert worst(dm.check_gradients(lambda: dm.log(x).sum(), [x])) < 1e-6


@pytest.mark.parametrize("slope", [0.01, 0.2])
def test_leaky_relu_gradient_away_from_zero(slope, rng):
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 2.0, size=(3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    assert worst(dm.check_gradients(lambda: (dm.leaky_relu(x, slope) * w).sum(), [x])) < 1e-6


def test_clip_gradient_inside_and_outside(rng):
    x = Tensor(np.array([-2.0, -0.3, 0.2, 0.7, 3.0]), requires_grad=True)
    assert worst(dm.check_gradients(lambda: (dm.clip(x, -1.0, 1.0) * x).sum(), [x])) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(op, rng):
    a = param(rng, 2, 3)
    b = param(rng, 3, low=0.5, high=1.5)
    f = getattr(dm, op)
    w = rng.standard_normal((2, 3))
    assert worst(dm.check_gradients(lambda: (f(a, b) * w).sum(), [a, b])) < 1e-6


def test_matmul_gradient_of_sum(rng):
    A, B = param(rng, 3, 4), param(rng, 4, 2)
    assert worst(dm.check_gradients(lambda: (A @ B).sum(), [A, B])) < 1e-6


def test_batched_matmul_gradient(rng):
    A, B = param(rng, 2, 3, 4), param(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    assert worst(dm.check_gradients(lambda: ((A @ B) * w).sum(), [A, B])) < 1e-6


def test_concat_and_stack_gradients(rng):
    a, b = param(rng, 2, 3), param(rng, 1, 3)
    w1, w2 = rng.standard_normal((3, 3)), rng.standard_normal((2, 2, 3))
    assert worst(dm.check_gradients(lambda: (dm.concat([a, b]) * w1).sum(), [a, b])) < 1e-6
    c = param(rng, 2, 3)
    assert worst(dm.check_gradients(lambda: (dm.stack([a, c], axis=1) * w2).sum(), [a, c])) < 1e-6


def test_masked_softmax_gradient(rng):
    x = param(rng, 3, 4)
    mask = np.zeros((3, 4))
    mask[0, 1] = mask[2, 3] = mask[2, 0] = NEG
    w = rng.standard_normal((3, 4))
    report = dm.check_gradients(lambda: (dm.masked_softmax(x, mask) * w).sum(), [x])
    assert worst(report) < 1e-6
    x.grad = None
    (dm.masked_softmax(x, mask) * w).sum().backward()
    assert x.grad[0, 1] == 0.0 and x.grad[2, 3] == 0.0


# -- properties -------------------------------------------------------------------

finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite), finite)
def test_softmax_shift_invariance(x, c):
    a = dm.softmax(Tensor(x)).data
    b = dm.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-15)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.bool_, 5))
def test_masked_softmax_support(x, keep):
    keep = keep.copy()
    keep[0] = True
    out = dm.masked_softmax(Tensor(x), dm.mask_from_present(keep)).data
    assert np.all(out[~keep] == 0.0)
    assert np.all(out[keep] >= 0.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_relative_error_floor():
    assert dm.relative_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-6)
    assert dm.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
