"""Tape and backward contracts."""

import numpy as np
import pytest

from qpmseg import ops
from qpmseg.gradcheck import grad_check
from qpmseg.tensor import ShapeError, Tape, TapeError, Tensor, backward


def test_sum_backward_is_all_ones():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    with Tape():
        loss = ops.sum_all(x)
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_half_sum_of_squares_backward_is_x():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with Tape():
        loss = ops.scale(ops.sum_all(ops.mul(x, x)), 0.5)
    backward(loss)
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_fanout_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        y = ops.mul(x, x)           # x^2
        loss = ops.sum_all(ops.add(y, ops.scale(x, 3.0)))  # x^2 + 3x
    backward(loss)
    np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


def test_shared_gradient_buffers_do_not_alias():
    # z = x + y contributes the same upstream array to both inputs; later
    # accumulation into one must not corrupt the other
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    with Tape():
        z = ops.add(x, y)
        loss = ops.sum_all(ops.add(z, ops.mul(x, x)))
    backward(loss)
    np.testing.assert_allclose(x.grad, 1.0 + 2 * x.data)
    np.testing.assert_allclose(y.grad, [1.0, 1.0])


def test_double_backward_without_reset_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)
    tape.reset()
    x.zero_grad()  # grads accumulate across backward calls unless cleared
    with tape:
        loss2 = ops.sum_all(ops.mul(x, x))
    backward(loss2)  # fine after reset
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_non_scalar_loss_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ops.mul(x, x)
    with pytest.raises(TapeError):
        backward(y)


def test_off_tape_loss_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum_all(x)  # no tape active: untracked
    with pytest.raises(TapeError):
        backward(loss)


def test_mixing_tapes_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ops.mul(x, x)
    with Tape():
        with pytest.raises(TapeError):
            ops.sum_all(y)


def test_untracked_forward_records_nothing():
    x = Tensor(np.ones(3))  # requires_grad False
    with Tape() as tape:
        ops.sum_all(ops.mul(x, x))
    assert len(tape) == 0


def test_grad_exact_zero_for_disconnected_leaf():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = ops.sum_all(ops.mul(x, x))
    backward(loss)
    assert z.grad is None


def test_backward_deterministic_given_identical_tape():
    rng = np.random.default_rng(1)
    xv = rng.normal(size=(2, 3, 6, 6))
    wv = rng.normal(size=(4, 3, 3, 3))
    grads = []
    for _ in range(2):
        x = Tensor(xv.copy(), requires_grad=True)
        w = Tensor(wv.copy(), requires_grad=True)
        with Tape():
            loss = ops.sum_all(ops.leaky_relu(ops.conv2d(x, w, None, padding=1)))
        backward(loss)
        grads.append((x.grad.copy(), w.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0])
    assert np.array_equal(grads[0][1], grads[1][1])


def test_composite_conv_norm_relu_graph_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    gamma = rng.normal(size=3) + 1.5
    beta = rng.normal(size=3)

    def fn(xx, ww, bb, gg, be):
        h = ops.conv2d(xx, ww, bb, stride=1, padding=1)
        h = ops.instance_norm(h, gg, be)
        h = ops.leaky_relu(h, 0.01)
        return ops.sum_all(ops.mul(h, h))

    report = grad_check(fn, [Tensor(a) for a in (x, w, b, gamma, beta)], tol=1e-6)
    assert report.passed, str(report)


def test_requires_grad_on_u8_raises():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3, dtype=np.uint8), requires_grad=True)
