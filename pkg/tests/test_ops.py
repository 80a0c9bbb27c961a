import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnerv import ops
from pnerv.autodiff import grad_check


def naive_conv(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def naive_deconv(x, w, stride, pad):
    a, h, wd = x.shape
    _, bch, k, _ = w.shape
    full = np.zeros((bch, (h - 1) * stride + k, (wd - 1) * stride + k))
    for ci in range(a):
        for i in range(h):
            for j in range(wd):
                full[:, i * stride : i * stride + k, j * stride : j * stride + k] += x[ci, i, j] * w[ci]
    return full[:, pad : full.shape[1] - pad, pad : full.shape[2] - pad]


def projected_check(fn, params, out_shape, rng):
    r = rng.standard_normal(out_shape)
    return grad_check(lambda v: ops.total(ops.mul(fn(v), r)), params)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_1x1():
    out = ops.conv2d(np.array([[[0.7]]]), np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, [[[0.7]]])


def test_conv_constant_interior():
    out = ops.conv2d(np.full((1, 5, 5), 0.3), np.ones((1, 1, 3, 3)), padding=1)
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 9 * 0.3, rtol=0, atol=1e-15)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_nested_loops(rng, stride, pad):
    x = rng.standard_normal((2, 4, 4))
    w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(ops.conv2d(x, w, b, stride=stride, padding=pad), naive_conv(x, w, b, stride, pad),
                               rtol=0, atol=1e-12)


def test_conv_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


# ---------------------------------------------------------------- deconv2d

def test_deconv_stride1_identity():
    x = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(ops.deconv2d(x, np.ones((1, 1, 1, 1))), x)


def test_deconv_single_tap():
    out = ops.deconv2d(np.array([[[0.4]]]), np.ones((1, 1, 2, 2)), stride=2)
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 0.4))


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (4, 2, 1)])
def test_deconv_matches_scatter_loops(rng, k, stride, pad):
    x, w = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, k, k))
    np.testing.assert_allclose(ops.deconv2d(x, w, stride=stride, padding=pad), naive_deconv(x, w, stride, pad),
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("h,w,stride,pad", [(5, 6, 1, 1), (7, 9, 2, 1), (6, 4, 1, 0)])
def test_conv_deconv_adjoint(rng, h, w, stride, pad):
    wt = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((2, h, w))
    y = rng.standard_normal((3, ops.conv_output_size(h, 3, stride, pad), ops.conv_output_size(w, 3, stride, pad)))
    lhs = np.sum(ops.conv2d(x, wt, stride=stride, padding=pad) * y)
    rhs = np.sum(x * ops.deconv2d(y, wt, stride=stride, padding=pad))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_deconv_equals_dense_transpose(rng):
    # explicit conv matrix, then its transpose applied to y
    w = rng.standard_normal((2, 1, 3, 3))
    h = wd = 5
    n_in = 1 * h * wd
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        cols.append(ops.conv2d(e.reshape(1, h, wd), w, stride=2, padding=1).ravel())
    mat = np.stack(cols, axis=1)
    y = rng.standard_normal((2, 3, 3))
    np.testing.assert_allclose(ops.deconv2d(y, w, stride=2, padding=1).ravel(), mat.T @ y.ravel(),
                               rtol=0, atol=1e-12)


# ---------------------------------------------------------------- pixel shuffle

def test_pixel_shuffle_unrolled():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 2), [[[1.0, 2.0], [3.0, 4.0]]])


def test_pixel_shuffle_r1_identity(rng):
    x = rng.standard_normal((3, 2, 5))
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 1), x)


def test_pixel_shuffle_layout_loops(rng):
    r, x = 3, rng.standard_normal((18, 2, 3))
    out = ops.pixel_shuffle(x, r)
    for c in range(2):
        for h in range(2):
            for w in range(3):
                for i in range(r):
                    for j in range(r):
                        assert out[c, h * r + i, w * r + j] == x[c * r * r + i * r + j, h, w]


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_pixel_shuffle_bijection(c, r, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((c * r * r, h, w))
    y = ops.pixel_shuffle(x, r)
    assert y.shape == (c, h * r, w * r)
    np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.ravel()))
    np.testing.assert_array_equal(ops.pixel_unshuffle(y, r), x)


def test_pixel_shuffle_indivisible():
    with pytest.raises(ValueError):
        ops.pixel_shuffle(np.zeros((3, 2, 2)), 2)


# ---------------------------------------------------------------- bilinear

def test_bilinear_constant_and_identity(rng):
    out = ops.bilinear_upsample(np.full((2, 3, 4), 0.25), 3)
    assert out.shape == (2, 9, 12)
    np.testing.assert_allclose(out, 0.25, rtol=0, atol=1e-15)
    x = rng.standard_normal((1, 3, 3))
    np.testing.assert_array_equal(ops.bilinear_upsample(x, 1), x)


def test_bilinear_hand_values():
    # half-pixel sample positions -0.25, 0.25, 0.75, 1.25 clamp to the ends
    out = ops.bilinear_upsample(np.array([[[0.0, 1.0]]]), 2)
    np.testing.assert_allclose(out, [[[0.0, 0.25, 0.75, 1.0], [0.0, 0.25, 0.75, 1.0]]], rtol=0, atol=1e-15)


# ---------------------------------------------------------------- activations

def test_activation_points():
    assert ops.gelu(np.array([0.0]))[0] == 0.0
    assert ops.sigmoid(np.array([0.0]))[0] == 0.5
    assert ops.relu(np.array([-1.0]))[0] == 0.0
    ref = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert ops.gelu(np.array([1.0]))[0] == pytest.approx(ref, abs=1e-15)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sigmoid_symmetry_and_range(vals):
    # beyond |x| ~ 36.7 the float64 result rounds to exactly 0 or 1
    x = np.array(vals)
    s = ops.sigmoid(x)
    np.testing.assert_allclose(s + ops.sigmoid(-x), 1.0, rtol=0, atol=1e-15)
    assert np.all((s > 0) & (s < 1))


def test_activation_monotonicity():
    x = np.linspace(-10, 10, 4001)
    assert np.all(np.diff(ops.relu(x)) >= 0)
    assert np.all(np.diff(ops.sigmoid(x)) >= 0)
    g = ops.gelu(x)
    right = x > -0.75
    assert np.all(np.diff(g[right]) >= 0)


def test_sigmoid_extremes_finite():
    s = ops.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(s))


# ---------------------------------------------------------------- batch norm

def test_batch_norm_training_normalizes(rng):
    x = 10 * rng.standard_normal((3, 6, 7)) + 4
    out = ops.batch_norm2d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True)
    assert np.all(np.abs(out.mean(axis=(1, 2))) < 1e-9)
    np.testing.assert_allclose(out.var(axis=(1, 2)), 1.0, rtol=0, atol=1e-6)


def test_batch_norm_variance_closed_form(rng):
    x = rng.standard_normal((2, 5, 5))
    out = ops.batch_norm2d(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)
    v = x.var(axis=(1, 2))
    np.testing.assert_allclose(out.var(axis=(1, 2)), v / (v + 1e-5), rtol=1e-12)


def test_batch_norm_constant_channel_is_zero():
    out = ops.batch_norm2d(np.full((1, 3, 3), 2.5), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), training=True)
    np.testing.assert_array_equal(out, 0.0)


def test_batch_norm_eval_affine(rng):
    x = rng.standard_normal((2, 3, 4))
    g, b = rng.standard_normal(2), rng.standard_normal(2)
    mean, var = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    out = ops.batch_norm2d(x, g, b, mean.copy(), var.copy(), training=False)
    ref = (x - mean[:, None, None]) / np.sqrt(var[:, None, None] + 1e-5) * g[:, None, None] + b[:, None, None]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-13)


def test_batch_norm_running_stats_update(rng):
    x = rng.standard_normal((2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm2d(x, np.ones(2), np.zeros(2), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(1, 2)), rtol=1e-13)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(1, 2), ddof=1), rtol=1e-13)
    frozen = rm.copy()
    ops.batch_norm2d(x, np.ones(2), np.zeros(2), rm, rv, training=True, update_stats=False)
    np.testing.assert_array_equal(rm, frozen)


# ---------------------------------------------------------------- gradients, three shapes each

SHAPES = [(1, 3, 3), (2, 4, 5), (3, 5, 2)]


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradcheck(rng, shape, stride):
    c, h, w = shape
    out_shape = (2, ops.conv_output_size(h, 3, stride, 1), ops.conv_output_size(w, 3, stride, 1))
    rep = projected_check(lambda v: ops.conv2d(v["x"], v["w"], v["b"], stride=stride),
                          {"x": rng.standard_normal(shape), "w": rng.standard_normal((2, c, 3, 3)),
                           "b": rng.standard_normal(2)}, out_shape, rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
def test_deconv2d_gradcheck(rng, shape):
    c, h, w = shape
    rep = projected_check(lambda v: ops.deconv2d(v["x"], v["w"], v["b"], stride=2),
                          {"x": rng.standard_normal(shape), "w": rng.standard_normal((c, 2, 2, 2)),
                           "b": rng.standard_normal(2)}, (2, 2 * h, 2 * w), rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
def test_pixel_shuffle_gradcheck(rng, shape):
    c, h, w = shape
    rep = projected_check(lambda v: ops.pixel_shuffle(v["x"], 2), {"x": rng.standard_normal((4 * c, h, w))},
                          (c, 2 * h, 2 * w), rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
def test_bilinear_gradcheck(rng, shape):
    c, h, w = shape
    rep = projected_check(lambda v: ops.bilinear_upsample(v["x"], 2), {"x": rng.standard_normal(shape)},
                          (c, 2 * h, 2 * w), rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("name", ["relu", "gelu", "sigmoid"])
def test_activation_gradcheck(rng, shape, name):
    fn = getattr(ops, name)
    x = rng.standard_normal(shape) * 2
    x[np.abs(x) < 1e-3] = 0.5  # keep relu probes off the kink
    rep = projected_check(lambda v: fn(v["x"]), {"x": x}, shape, rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(rng, shape, training):
    c = shape[0]
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
    rep = projected_check(
        lambda v: ops.batch_norm2d(v["x"], v["g"], v["b"], rm.copy(), rv.copy(), training=training,
                                   update_stats=False),
        {"x": rng.standard_normal(shape), "g": rng.uniform(0.5, 1.5, c), "b": rng.standard_normal(c)}, shape, rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_gradcheck(rng, shape):
    def f(v):
        a = ops.add(ops.mul(v["a"], v["b"]), ops.sub(v["a"], v["bias"]))
        return ops.concat([a, v["b"]])

    c, h, w = shape
    rep = projected_check(f, {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape),
                              "bias": rng.standard_normal((c, 1, 1))}, (2 * c, h, w), rng)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("shape", SHAPES)
def test_mse_gradcheck(rng, shape):
    rep = grad_check(lambda v: ops.mean_squared_error(v["p"], v["t"]),
                     {"p": rng.standard_normal(shape), "t": rng.standard_normal(shape)})
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- general

def test_deterministic_init():
    a = ops.kaiming_normal(np.random.default_rng(5), (4, 3, 3, 3), 36)
    b = ops.kaiming_normal(np.random.default_rng(5), (4, 3, 3, 3), 36)
    np.testing.assert_array_equal(a, b)


def test_outputs_finite_on_finite_inputs(rng):
    x = rng.standard_normal((2, 4, 4)) * 100
    y = ops.gelu(ops.conv2d(x, rng.standard_normal((4, 2, 3, 3))))
    y = ops.batch_norm2d(ops.pixel_shuffle(y, 2), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), training=True)
    assert np.all(np.isfinite(y)) and y.size == 1 * 8 * 8
