"""Differentiable tensor operations.

Feature maps are float64 arrays of shape ``(C, H, W)`` (batch of one, row-major,
so flat index ``(c*H + h)*W + w``). Every op accepts either plain arrays or
:class:`~pnerv.autodiff.Var` inputs. With plain arrays it just computes; as soon
as one input is a ``Var`` the op is recorded on that Var's tape and a ``Var`` is
returned.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Var

__all__ = [
    "value_of", "add", "sub", "mul", "total", "mean_squared_error", "concat",
    "relu", "gelu", "sigmoid", "conv2d", "deconv2d", "pixel_shuffle",
    "pixel_unshuffle", "bilinear_upsample", "bilinear_matrix", "batch_norm2d",
    "BatchNormState", "conv_output_size", "deconv_output_size", "kaiming_normal",
]

GELU_COEF = math.sqrt(2.0 / math.pi)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def value_of(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(kind, inputs, value, vjp, saved=()):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(kind, [x if isinstance(x, Var) else None for x in inputs], value, vjp, saved)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("add", (a, b), av + bv,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("sub", (a, b), av - bv,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 saved=(av, bv))


def total(x):
    """Sum of all entries, as a 1-element array."""
    xv = value_of(x)
    return _emit("sum", (x,), np.array([xv.sum()]), lambda g: (np.full(xv.shape, g[0]),))


def mean_squared_error(pred, target):
    pv, tv = value_of(pred), value_of(target)
    if pv.shape != tv.shape:
        raise ValueError(f"shape mismatch {pv.shape} vs {tv.shape}")
    diff = pv - tv
    n = diff.size

    def vjp(g):
        d = (2.0 * g[0] / n) * diff
        return d, -d

    return _emit("mse", (pred, target), np.array([np.mean(diff * diff)]), vjp, saved=(diff,))


def concat(xs):
    vals = [value_of(x) for x in xs]
    splits = np.cumsum([v.shape[0] for v in vals])[:-1]
    return _emit("concat", tuple(xs), np.concatenate(vals, axis=0),
                 lambda g: tuple(np.split(g, splits, axis=0)))


# ---------------------------------------------------------------- activations

def relu(x):
    xv = value_of(x)
    mask = xv > 0
    return _emit("relu", (x,), np.where(mask, xv, 0.0), lambda g: (g * mask,), saved=(mask,))


def gelu(x):
    """GELU, tanh approximation."""
    xv = value_of(x)
    x2 = xv * xv
    inner = GELU_COEF * xv * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * GELU_COEF * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _emit("gelu", (x,), out, vjp, saved=(xv, t))


def sigmoid(x):
    xv = value_of(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),), saved=(out,))


# ---------------------------------------------------------------- convolution

def kaiming_normal(rng: np.random.Generator, shape, fan_out: int) -> np.ndarray:
    """He-normal init in fan-out mode with ReLU gain."""
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_out)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def deconv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _windows(xp, k, stride, ho, wo):
    # (C, Ho, Wo, k, k) strided view, no copy
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(cols, c, hp, wp, k, stride, ho, wo):
    """Scatter-add (C, k, k, Ho, Wo) patch contributions into a (C, Hp, Wp) canvas."""
    out = np.zeros((c, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return out


def _conv_fwd(xv, wv, stride, padding):
    c, h, w = xv.shape
    k = wv.shape[2]
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.pad(xv, ((0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _windows(xp, k, stride, ho, wo)
    return np.tensordot(wv, cols, axes=([1, 2, 3], [0, 3, 4])), xp, cols


def _conv_input_grad(g, wv, in_shape, stride, padding):
    c, h, w = in_shape
    k = wv.shape[2]
    ho, wo = g.shape[1:]
    dcols = np.tensordot(wv, g, axes=([0], [0]))  # (C, k, k, Ho, Wo)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = _col2im(dcols, c, max(hp, (ho - 1) * stride + k), max(wp, (wo - 1) * stride + k), k, stride, ho, wo)
    return dxp[:, padding : padding + h, padding : padding + w]


def _check_conv(xv, wv, bv):
    if wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ValueError(f"kernel must be (out, in, k, k), got {wv.shape}")
    if bv is not None and bv.shape != (wv.shape[0],):
        raise ValueError(f"bias shape {bv.shape} does not match {wv.shape[0]} output channels")
    if xv.ndim != 3 or xv.shape[0] != wv.shape[1]:
        raise ValueError(f"input {xv.shape} incompatible with kernel {wv.shape}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None):
    """2-D cross-correlation with zero padding.

    ``weight`` is ``(out, in, k, k)`` with odd ``k``; ``padding`` defaults to
    ``(k - 1) // 2``, which preserves spatial size at stride 1.
    """
    xv, wv = value_of(x), value_of(weight)
    bv = None if bias is None else value_of(bias)
    _check_conv(xv, wv, bv)
    k = wv.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    out, xp, cols = _conv_fwd(xv, wv, stride, padding)
    if bv is not None:
        out = out + bv[:, None, None]

    def vjp(g):
        dx = _conv_input_grad(g, wv, xv.shape, stride, padding)
        dw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        db = None if bias is None else g.sum(axis=(1, 2))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, lambda g: vjp(g)[: len(inputs)], saved=(cols,))


def deconv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Transposed convolution: the adjoint of :func:`conv2d` with the same weight.

    ``weight`` is ``(A, B, k, k)`` and maps ``A`` input channels to ``B`` output
    channels (the reverse of conv2d). Output spatial size is
    ``(n - 1) * stride - 2 * padding + k``; with ``k == stride`` and no padding
    that is ``n * stride``. ``bias`` has length ``B``.
    """
    xv, wv = value_of(x), value_of(weight)
    bv = None if bias is None else value_of(bias)
    if wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ValueError(f"kernel must be (A, B, k, k), got {wv.shape}")
    if xv.ndim != 3 or xv.shape[0] != wv.shape[0]:
        raise ValueError(f"input {xv.shape} incompatible with kernel {wv.shape}")
    if bv is not None and bv.shape != (wv.shape[1],):
        raise ValueError(f"bias shape {bv.shape} does not match {wv.shape[1]} output channels")
    k = wv.shape[2]
    _, h, w = xv.shape
    ho, wo = deconv_output_size(h, k, stride, padding), deconv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("deconv2d output would be empty")
    out = _conv_input_grad(xv, wv, (wv.shape[1], ho, wo), stride, padding)
    if bv is not None:
        out = out + bv[:, None, None]

    def vjp(g):
        dx, _, cols = _conv_fwd(g, wv, stride, padding)
        dw = np.tensordot(xv, cols, axes=([1, 2], [1, 2]))
        db = None if bias is None else g.sum(axis=(1, 2))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("deconv2d", inputs, out, lambda g: vjp(g)[: len(inputs)])


# ---------------------------------------------------------------- resampling

def _shuffle(xv, r):
    c, h, w = xv.shape
    return xv.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c // (r * r), h * r, w * r)


def _unshuffle(xv, r):
    c, h, w = xv.shape
    return xv.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h // r, w // r)


def pixel_shuffle(x, r: int):
    """``out[c, h*r+i, w*r+j] = x[c*r*r + i*r + j, h, w]``."""
    xv = value_of(x)
    if xv.ndim != 3 or r < 1 or xv.shape[0] % (r * r):
        raise ValueError(f"channels {xv.shape[0]} not divisible by r^2={r * r}")
    return _emit("pixel_shuffle", (x,), _shuffle(xv, r), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x, r: int):
    xv = value_of(x)
    if xv.ndim != 3 or r < 1 or xv.shape[1] % r or xv.shape[2] % r:
        raise ValueError(f"spatial dims {xv.shape[1:]} not divisible by r={r}")
    return _emit("pixel_unshuffle", (x,), _unshuffle(xv, r), lambda g: (_shuffle(g, r),))


def bilinear_matrix(n_in: int, r: int) -> np.ndarray:
    """``(n_in*r, n_in)`` interpolation matrix, half-pixel (align_corners=False) convention."""
    n_out = n_in * r
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = max((o + 0.5) / r - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_upsample(x, r: int):
    xv = value_of(x)
    if r < 1:
        raise ValueError("upscale factor must be >= 1")
    _, h, w = xv.shape
    mh, mw = bilinear_matrix(h, r), bilinear_matrix(w, r)
    out = mh @ xv @ mw.T
    return _emit("bilinear", (x,), out, lambda g: (mh.T @ g @ mw,))


# ---------------------------------------------------------------- normalization

class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels: int):
        self.weight = np.ones(channels)
        self.bias = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batch_norm2d(x, weight, bias, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 update_stats: bool = True):
    """Batch norm over the spatial dims of a single ``(C, H, W)`` sample.

    In training mode the running arrays are updated in place (unless
    ``update_stats`` is False); the running variance uses the unbiased estimate.
    """
    xv, gv, bv = value_of(x), value_of(weight), value_of(bias)
    c = xv.shape[0]
    if gv.shape != (c,) or bv.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch-norm state has wrong channel count for input {xv.shape}")
    n = xv.shape[1] * xv.shape[2]
    if training:
        mu = xv.mean(axis=(1, 2))
        var = xv.var(axis=(1, 2))
        if update_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[:, None, None]) * inv[:, None, None]
    out = xhat * gv[:, None, None] + bv[:, None, None]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        gx = g * gv[:, None, None]
        if training:
            dx = inv[:, None, None] * (gx - gx.mean(axis=(1, 2), keepdims=True)
                                       - xhat * (gx * xhat).mean(axis=(1, 2), keepdims=True))
        else:
            dx = gx * inv[:, None, None]
        return dx, dgamma, dbeta

    return _emit("batch_norm2d", (x, weight, bias), out, vjp, saved=(xhat, inv))
