import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from c3owd import sampling as sp
from c3owd.numeric import check_gradients, make_rng


def test_base_offsets():
    rng = make_rng(0)
    q = rng.normal(size=(3, 4))
    assert_array_equal(sp.base_offsets(q, np.zeros((4, 6)), np.zeros(6)), 0.0)
    b = rng.normal(size=6)
    assert_array_equal(sp.base_offsets(np.zeros((2, 4)), rng.normal(size=(4, 6)), b), np.tile(b, (2, 1)))
    W = np.outer([1.0, 2.0], [3.0, -1.0])
    assert_allclose(sp.base_offsets(np.array([[0.5, 0.25]]), W, np.zeros(2)), [[3.0, -1.0]])


def test_text_attention_examples():
    t = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    q = np.array([[0.0, 0.0, 2.0]])
    assert_allclose(sp.text_attention(q, t), [[0.5, 0.5]], rtol=1e-15)
    q2 = np.array([[50 * np.sqrt(3) + 1, 0.0, 0.0]])
    assert_allclose(sp.text_attention(q2, t), [[1.0, 0.0]], atol=1e-12)
    assert_array_equal(sp.text_attention(make_rng(1).normal(size=(4, 3)), t[:1]), 1.0)


@given(st.integers(0, 10_000))
def test_text_attention_rows_sum_to_one(seed):
    rng = make_rng(seed)
    a = sp.text_attention(rng.normal(size=(5, 4)) * 5, rng.normal(size=(3, 4)))
    assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_modulation_weights():
    rng = make_rng(2)
    attn = sp.text_attention(rng.normal(size=(3, 4)), rng.normal(size=(4, 4)))
    layers = [(rng.normal(size=(4, 5)), np.zeros(5)), (np.zeros((5, 4)), np.zeros(4))]
    assert_array_equal(sp.modulation_weights(attn, layers), 0.0)
    assert_array_equal(sp.modulation_weights(attn, [(np.eye(4), np.zeros(4))]), attn)


def test_modulation_mlp_backward():
    rng = make_rng(3)
    x = rng.normal(size=(3, 4))
    layers = [(rng.normal(size=(4, 5)), rng.normal(size=5)), (rng.normal(size=(5, 2)), rng.normal(size=2))]
    G = rng.normal(size=(3, 2))
    _, acts = sp.mlp_forward(x, layers)
    dx, grads = sp.mlp_backward(G, acts, layers)

    def loss(d):
        return np.sum(G * sp.mlp_forward(d["x"], [(d["W0"], d["b0"]), (d["W1"], d["b1"])])[0])
    inputs = dict(x=x, W0=layers[0][0], b0=layers[0][1], W1=layers[1][0], b1=layers[1][1])
    analytic = dict(x=dx, W0=grads[0][0], b0=grads[0][1], W1=grads[1][0], b1=grads[1][1])
    assert max(r.max_rel_err for r in check_gradients("mlp", loss, inputs, analytic)) <= 1e-8


def test_bilinear_examples():
    rng = make_rng(4)
    f = rng.normal(size=(3, 4, 5))
    # node (row 2, column 3)
    assert_array_equal(sp.bilinear_sample(f, [[3 / 4, 2 / 3]]), f[:, 2, 3][None])
    mid = sp.bilinear_sample(f, [[(1 + 0.5) / 4, 1 / 3]])
    assert_allclose(mid[0], (f[:, 1, 1] + f[:, 1, 2]) / 2, rtol=1e-14)
    assert_array_equal(sp.bilinear_sample(f, [[-0.5, -0.5]]), 0.0)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8), st.floats(-5, 5))
def test_constant_map_is_reproduced(points, c):
    out = sp.bilinear_sample(np.full((2, 5, 4), c), np.array(points))
    assert_allclose(out, c, rtol=1e-14, atol=1e-14)


@given(st.floats(0, 1))
def test_linear_along_axis(s):
    rng = make_rng(5)
    f = rng.normal(size=(2, 3, 3))
    out = sp.bilinear_sample(f, [[s * 0.5, 0.5]])[0]
    assert_allclose(out, (1 - s) * f[:, 1, 0] + s * f[:, 1, 1], atol=1e-14)


def test_bilinear_backward():
    rng = make_rng(6)
    f = rng.normal(size=(2, 5, 5))
    pts = np.array([[0.13, 0.62], [0.9, 0.31], [1.05, 0.4], [-0.1, 0.45]])
    G = rng.normal(size=(4, 2))
    dmap, dpts = sp.bilinear_sample_backward(G, f, pts)
    reps = check_gradients("bilinear", lambda d: np.sum(G * sp.bilinear_sample(d["f"], d["p"])),
                           dict(f=f, p=pts), dict(f=dmap, p=dpts), h=1e-5, order=2)
    assert max(r.max_rel_err for r in reps) <= 1e-7


def test_zero_heads_reduce_to_reference_sampling():
    rng = make_rng(7)
    N, K, C, D = 5, 3, 4, 6
    p = sp.init_sampler(D, 3, C, K, rng)
    q, t = rng.normal(size=(N, D)), rng.normal(size=(3, D))
    f = rng.normal(size=(C, 5, 5))
    refs = rng.uniform(0, 1, (N, 2))
    _, cache = sp.modulated_sample_forward(q, t, f, refs, p, K)
    plain = sp.bilinear_sample(f, refs)
    assert_array_equal(cache["flat"], np.tile(plain, (1, K)))


def test_grid_node_passthrough():
    rng = make_rng(8)
    C = 3
    p = sp.init_sampler(C, 2, C, 1, rng)
    p["out.W"] = np.eye(C)
    f = rng.normal(size=(C, 3, 3))
    refs = np.array([[0.0, 0.0], [0.5, 1.0]])
    out = sp.modulated_sample(rng.normal(size=(2, C)), rng.normal(size=(2, C)), f, refs, p, 1)
    assert_array_equal(out, np.stack([f[:, 0, 0], f[:, 2, 1]]))


def test_modulated_sample_gradients():
    from c3owd.suites import grad_modulated_sample
    for seed in range(3):
        for r in grad_modulated_sample(make_rng(seed)):
            assert r.max_rel_err <= 1e-5, r
