import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sprompts import gradcore as gc


def test_softmax_symmetric():
    out = gc.softmax(gc.tensor([[0.0, 0.0]])).data
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


def test_cosine_of_scaled_copy_is_one():
    v = np.array([[0.3, -1.2, 2.0]])
    out = gc.cosine_similarity(gc.tensor(v), gc.tensor(5 * v)).data
    assert out[0] == pytest.approx(1.0, abs=1e-7)


def test_cross_entropy_hand_value():
    # -log(e^2 / (e^2 + 1)) = log(1 + e^-2)
    loss = gc.cross_entropy(gc.tensor([[2.0, 0.0]]), [0])
    assert float(loss.data) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-6)
    assert float(loss.data) == pytest.approx(0.126928, abs=1e-6)


def test_cross_entropy_large_logits_stay_finite():
    loss = gc.cross_entropy(gc.tensor([[1000.0, -1000.0], [0.0, 800.0]]), [1, 1])
    assert np.isfinite(loss.data)


def test_backward_sum_of_squares():
    x = gc.parameter([1.0, 2.0])
    gc.backward(gc.sum_all(gc.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_cross_entropy_grad_is_softmax_minus_onehot():
    logits = gc.parameter([[0.3, -1.0, 2.0]])
    gc.backward(gc.cross_entropy(logits, [2]))
    p = np.exp([0.3, -1.0, 2.0]) / np.exp([0.3, -1.0, 2.0]).sum()
    np.testing.assert_allclose(logits.grad[0], p - np.eye(3)[2], atol=1e-6)
    # and the finite-difference oracle agrees
    rep = gc.finite_diff_grad_check(lambda z: gc.cross_entropy(z, [2]), np.array([[0.3, -1.0, 2.0]]))
    assert rep.max_rel_error < 1e-3


def test_parameter_off_tape_keeps_zero_grad():
    x, unused = gc.parameter([1.0, 2.0]), gc.parameter([3.0])
    gc.backward(gc.sum_all(x))
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_backward_rejects_non_scalar_and_reuse():
    x = gc.parameter([1.0, 2.0])
    with pytest.raises(gc.GradcoreError):
        gc.backward(gc.mul(x, x))
    loss = gc.sum_all(x)
    gc.backward(loss)
    with pytest.raises(gc.GradcoreError):
        gc.backward(loss)


def test_shape_mismatch_names_primitive():
    with pytest.raises(gc.ShapeError, match="matmul"):
        gc.matmul(gc.tensor(np.ones((2, 3))), gc.tensor(np.ones((2, 3))))


def test_normalize_zero_vector_errors():
    with pytest.raises(gc.GradcoreError):
        gc.normalize(gc.tensor(np.zeros((1, 3))))


def _step(momentum, lr, grads, start=0.0):
    p = gc.parameter([start])
    opt = gc.SGD([p], lr=lr, momentum=momentum)
    for g in grads:
        p.grad = np.array([g], np.float32)
        opt.step()
    return p


def test_sgd_plain_step():
    assert _step(0.0, 0.1, [1.0]).data[0] == pytest.approx(-0.1)


def test_sgd_momentum_unrolled():
    # v1 = 1, v2 = 0.9 + 1 = 1.9; total update 2.9
    assert _step(0.9, 1.0, [1.0, 1.0]).data[0] == pytest.approx(-2.9, abs=1e-6)


def test_sgd_zero_lr_is_identity():
    p = gc.parameter(np.random.default_rng(0).normal(size=(3, 4)))
    before = p.data.copy()
    opt = gc.SGD([p], lr=0.0)
    p.grad = np.ones_like(p.data)
    opt.step()
    assert p.data.tobytes() == before.tobytes()


def test_sgd_missing_grad_names_param():
    p = gc.parameter([1.0], name="w")
    p.grad = None
    with pytest.raises(gc.GradcoreError, match="w"):
        gc.sgd_momentum_step([p], gc.SGD([p]), 0.1)


def test_cosine_schedule_points():
    sched = gc.LrSchedule(0.1, 100)
    assert gc.cosine_anneal_lr(0, sched) == 0.1
    assert gc.cosine_anneal_lr(100, sched) == 0.0
    assert gc.cosine_anneal_lr(50, sched) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        gc.cosine_anneal_lr(101, sched)


@given(st.integers(1, 500), st.floats(1e-4, 10.0))
def test_cosine_schedule_non_increasing(total, base):
    sched = gc.LrSchedule(base, total)
    lrs = [gc.cosine_anneal_lr(t, sched) for t in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_grad_check_sum_of_squares():
    rep = gc.finite_diff_grad_check(lambda x: gc.sum_all(gc.mul(x, x)), np.array([0.5, -1.5, 2.0]))
    assert rep.max_rel_error < 1e-6


def test_grad_check_constant_function():
    rep = gc.finite_diff_grad_check(lambda x: gc.tensor(3.0), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(rep.analytic[0], 0.0)
    assert np.abs(rep.numeric[0]).max() <= 1e-6
    assert rep.passed


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                     elements=st.floats(-50, 50))


@given(finite_rows, st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    # float64 inputs: storing z + c as float32 would itself move the logits by ~eps32 * |c|
    with gc.precision(np.float64):
        a = gc.softmax(gc.tensor(z)).data
        b = gc.softmax(gc.tensor(z + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(gc.softmax(gc.tensor(z)).data.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_matmul_grad_random_shapes(seed, n, m):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, m)), r.normal(size=(m, 3))
    w = r.normal(size=(n, 3))
    rep = gc.finite_diff_grad_check(lambda x, y: gc.sum_all(gc.mul(gc.matmul(x, y), gc.tensor(w))), [a, b])
    assert rep.max_rel_error < 1e-3


def test_identical_runs_are_bitwise_equal():
    def train():
        r = np.random.default_rng(3)
        w = gc.parameter(r.normal(size=(4, 3)))
        x = gc.tensor(r.normal(size=(16, 4)))
        y = r.integers(0, 3, 16)
        opt = gc.SGD([w], lr=0.1)
        for _ in range(5):
            opt.zero_grad()
            gc.backward(gc.cross_entropy(gc.matmul(x, w), y))
            opt.step()
        return w.data.tobytes()

    assert train() == train()
