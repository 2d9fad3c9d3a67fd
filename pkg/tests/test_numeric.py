import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from c3owd.numeric import (
    NumericError, check_gradients, dump_tensor, finite_diff_gradient, flatten, layer_norm,
    layer_norm_backward, layer_norm_forward, load_tensor, make_rng, max_rel_err, sigmoid,
    softmax, spawn_rngs, squared_relu, unflatten,
)

from conftest import finite_arrays


def test_layer_norm_constant_row_is_zero():
    assert_array_equal(layer_norm(np.array([5.0, 5.0, 5.0]), np.ones(3), np.zeros(3)), 0.0)


def test_layer_norm_two_values():
    out = layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=1e-300)
    assert_allclose(out, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_zero_gain_returns_bias():
    x = make_rng(0).normal(size=(4, 2))
    assert_array_equal(layer_norm(x, np.zeros(2), np.array([7.0, 7.0])), 7.0)


def test_layer_norm_rejects_empty_axis():
    with pytest.raises(ValueError):
        layer_norm(np.zeros((3, 0)), np.ones(0), np.zeros(0))


@given(finite_arrays((5, 6), -10, 10))
def test_layer_norm_statistics(x):
    if np.min(np.var(x, axis=-1)) < 1e-3:
        return
    y = layer_norm(x, np.ones(6), np.zeros(6), eps=1e-12)
    assert np.max(np.abs(y.mean(axis=-1))) <= 1e-10
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) <= 1e-6


def test_layer_norm_backward_matches_fd():
    rng = make_rng(3)
    x, G = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    gain, bias = rng.normal(size=5), rng.normal(size=5)
    _, cache = layer_norm_forward(x, gain, bias)
    dx, dg, db = layer_norm_backward(G, cache)
    reps = check_gradients("ln", lambda d: np.sum(G * layer_norm(d["x"], d["g"], d["b"])),
                           dict(x=x, g=gain, b=bias), dict(x=dx, g=dg, b=db))
    assert max(r.max_rel_err for r in reps) <= 1e-7


def test_softmax_examples():
    assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    assert_allclose(softmax(np.array([1000.0, 0.0])), [1.0, 0.0], atol=1e-12)
    assert_allclose(softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


@given(finite_arrays((4, 7), -50, 50), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    y = softmax(x)
    assert np.all(y > 0)
    assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert_allclose(softmax(x + c), y, atol=1e-12)


def test_activations():
    assert sigmoid(0.0) == 0.5
    assert squared_relu(-3.0) == 0.0
    assert squared_relu(2.0) == 4.0
    s = sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(s)) and s[0] >= 0 and s[1] <= 1


def test_finite_diff_examples():
    assert abs(finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]))[0] - 6.0) <= 1e-8
    x = make_rng(1).normal(size=7)
    assert_allclose(finite_diff_gradient(np.sum, x), 1.0, atol=1e-9)


@pytest.mark.parametrize("order", [2, 4, 6])
def test_finite_diff_orders_on_cubic(order):
    f = lambda x: float(np.sum(x ** 3))
    x = np.array([0.5, -1.5])
    tol = {2: 1e-9, 4: 1e-12, 6: 1e-12}[order]
    assert_allclose(finite_diff_gradient(f, x, h=1e-5 if order == 2 else 1e-3, order=order),
                    3 * x ** 2, rtol=tol)


def test_finite_diff_names_bad_coordinate():
    def f(x):
        return np.inf if x[1] > 0.5 else float(np.sum(x))
    with pytest.raises(NumericError, match="1"):
        finite_diff_gradient(f, np.array([0.0, 0.5]), h=1e-3)


def test_max_rel_err_floor():
    assert max_rel_err([1e-12], [0.0]) == pytest.approx(1e-4)
    assert max_rel_err([2.0], [1.0]) == 0.5


def test_determinism_and_spawn():
    a = make_rng(42).normal(size=10)
    b = make_rng(42).normal(size=10)
    assert_array_equal(a, b)
    r1 = [g.normal() for g in spawn_rngs(5, 3)]
    r2 = [g.normal() for g in spawn_rngs(5, 3)]
    assert r1 == r2 and len(set(r1)) == 3


def test_flatten_roundtrip():
    p = {"b": np.arange(3.0), "a": np.ones((2, 2))}
    q = unflatten(flatten(p), p)
    for k in p:
        assert_array_equal(p[k], q[k])
    with pytest.raises(ValueError):
        unflatten(np.zeros(3), p)


def test_dump_load_roundtrip(tmp_path):
    x = make_rng(9).normal(size=(2, 3, 4)) * 10.0 ** make_rng(8).integers(-200, 200, (2, 3, 4))
    path = tmp_path / "t.csv"
    dump_tensor(path, x)
    assert path.read_text().splitlines()[0] == "shape=2x3x4"
    assert_array_equal(load_tensor(path), x)


def test_dump_format_and_empty(tmp_path):
    path = tmp_path / "t.csv"
    dump_tensor(path, np.arange(6.0).reshape(2, 3))
    lines = path.read_text().splitlines()
    assert lines[0] == "shape=2x3"
    assert sum(len(l.split(",")) for l in lines[1:]) == 6
    with pytest.raises(ValueError):
        dump_tensor(path, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        dump_tensor(path, np.float64(1.0))
