import numpy as np
import pytest

from pnerv import ops
from pnerv.autodiff import Tape, backward, grad_check


def test_sum_gives_ones(rng):
    tape = Tape()
    x = tape.var(rng.standard_normal((2, 3, 4)))
    backward(tape, ops.total(x))
    np.testing.assert_array_equal(tape.grad(x), np.ones((2, 3, 4)))


def test_sum_of_squares_gives_twice_x(rng):
    tape = Tape()
    xv = rng.standard_normal((3, 2, 2))
    x = tape.var(xv)
    backward(tape, ops.total(ops.mul(x, x)))
    np.testing.assert_allclose(tape.grad(x), 2 * xv, rtol=0, atol=1e-15)


def test_root_gradient_is_ones():
    tape = Tape()
    x = tape.var(np.array([2.0]))
    root = ops.total(ops.mul(x, 3.0))
    grads = backward(tape, root)
    np.testing.assert_array_equal(grads[root.id], np.ones(1))


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.var(np.array([1.5, -2.0]))
    backward(tape, ops.total(ops.add(ops.mul(x, 2.0), ops.mul(x, 5.0))))
    np.testing.assert_array_equal(tape.grad(x), [7.0, 7.0])


def test_topological_order(rng):
    tape = Tape()
    x = tape.var(rng.standard_normal((1, 3, 3)))
    w = tape.var(rng.standard_normal((2, 1, 3, 3)))
    ops.total(ops.gelu(ops.conv2d(x, w)))
    for node in tape.nodes:
        assert all(i < node.out for i in node.inputs if i >= 0)


def test_root_not_on_tape_rejected():
    a, b = Tape(), Tape()
    y = ops.total(a.var(np.ones(2)))
    with pytest.raises(ValueError):
        backward(b, y)


def test_non_scalar_root_rejected():
    tape = Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ValueError):
        backward(tape, ops.mul(x, 2.0))


def test_unreached_leaf_has_zero_grad():
    tape = Tape()
    x, unused = tape.var(np.ones(2)), tape.var(np.ones(4))
    backward(tape, ops.total(x))
    np.testing.assert_array_equal(tape.grad(unused), np.zeros(4))


def test_grad_check_linear_map_is_machine_precise(rng):
    a = rng.standard_normal((3, 4))
    rep = grad_check(lambda v: ops.total(ops.mul(v["x"], a)), {"x": rng.standard_normal((3, 4))})
    assert rep.passed and rep.max_error < 1e-9


def test_grad_check_detects_wrong_gradient():
    from pnerv.ops import _emit, value_of

    def bad_square(x):
        xv = value_of(x)
        return _emit("bad", (x,), xv * xv, lambda g: (g * xv,))  # missing factor 2

    rep = grad_check(lambda v: ops.total(bad_square(v["x"])), {"x": np.array([1.0, 2.0])})
    assert not rep.passed
    assert rep.max_error == pytest.approx(0.5, rel=1e-6)


def test_grad_check_max_entries_subsamples(rng):
    calls = []

    def f(v):
        calls.append(1)
        return ops.total(ops.mul(v["x"], v["x"]))

    grad_check(f, {"x": rng.standard_normal(50)}, max_entries=5)
    assert len(calls) == 1 + 2 * 5
