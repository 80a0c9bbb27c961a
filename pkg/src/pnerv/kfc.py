"""Kronecker fully-connected (KFc) upscaling.

Each channel ``i`` of a ``(C, H_in, W_in)`` input is mapped by
``K1[i] @ x[i] @ K2[i]`` to ``(H_out, W_out)``, then a rank-1 bias
``b_c[i] * outer(b_h, b_w)`` is added. Per channel this is the dense map
``kron(K1[i], K2[i].T)`` acting on the row-major flattened input, at a
fraction of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from .ops import _emit, add, value_of

__all__ = [
    "KFcParams", "OperatorBudget", "kfc_forward", "kfc_bias", "kfc_dense_oracle",
    "kfc_param_count", "pixelshuffle_param_count", "operator_flops", "budget_table",
]

# indirection so tests can count multiply-accumulates of a real forward pass
_matmul = np.matmul


@dataclass
class KFcParams:
    K1: Any  # (C, H_out, H_in)
    K2: Any  # (C, W_in, W_out)
    b_c: Any  # (C,)
    b_h: Any  # (H_out,)
    b_w: Any  # (W_out,)

    def __post_init__(self):
        k1, k2 = value_of(self.K1), value_of(self.K2)
        bc, bh, bw = value_of(self.b_c), value_of(self.b_h), value_of(self.b_w)
        if k1.ndim != 3 or k2.ndim != 3 or k1.shape[0] != k2.shape[0]:
            raise ValueError(f"K1 {k1.shape} and K2 {k2.shape} must be (C, ., .) with equal C")
        if bc.shape != (k1.shape[0],) or bh.shape != (k1.shape[1],) or bw.shape != (k2.shape[2],):
            raise ValueError("bias vectors inconsistent with kernel shapes")

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, in_shape: tuple[int, int],
             out_shape: tuple[int, int]) -> "KFcParams":
        (hi, wi), (ho, wo) = in_shape, out_shape
        # fan-out as computed for 3-D tensors: size(0) * prod(size[2:])
        k1 = rng.standard_normal((channels, ho, hi)) * np.sqrt(2.0 / (channels * hi))
        k2 = rng.standard_normal((channels, wi, wo)) * np.sqrt(2.0 / (channels * wo))
        return cls(k1, k2, np.zeros(channels), np.zeros(ho), np.zeros(wo))

    @property
    def channels(self) -> int:
        return value_of(self.K1).shape[0]

    @property
    def in_shape(self) -> tuple[int, int]:
        return value_of(self.K1).shape[2], value_of(self.K2).shape[1]

    @property
    def out_shape(self) -> tuple[int, int]:
        return value_of(self.K1).shape[1], value_of(self.K2).shape[2]

    def arrays(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def kfc_bias(b_c, b_h, b_w):
    """Rank-1 bias tensor ``out[c, h, w] = b_c[c] * b_h[h] * b_w[w]``."""
    bc, bh, bw = value_of(b_c), value_of(b_h), value_of(b_w)
    hw = np.outer(bh, bw)
    out = bc[:, None, None] * hw[None]

    def vjp(g):
        return (
            np.einsum("chw,hw->c", g, hw),
            np.einsum("chw,c,w->h", g, bc, bw),
            np.einsum("chw,c,h->w", g, bc, bh),
        )

    return _emit("kfc_bias", (b_c, b_h, b_w), out, vjp)


def _kfc_matmuls(x, K1, K2):
    xv, k1, k2 = value_of(x), value_of(K1), value_of(K2)
    if xv.ndim != 3 or xv.shape[0] != k1.shape[0] or xv.shape[1] != k1.shape[2] or xv.shape[2] != k2.shape[1]:
        raise ValueError(f"input {xv.shape} incompatible with KFc kernels {k1.shape}, {k2.shape}")
    left = _matmul(k1, xv)
    out = _matmul(left, k2)

    def vjp(g):
        d_left = g @ k2.transpose(0, 2, 1)
        return k1.transpose(0, 2, 1) @ d_left, d_left @ xv.transpose(0, 2, 1), left.transpose(0, 2, 1) @ g

    return _emit("kfc_matmul", (x, K1, K2), out, vjp, saved=(xv, left))


def kfc_forward(x, p: KFcParams):
    """``concat_i(K1[i] @ x[i] @ K2[i]) + b_c (x) b_h (x) b_w``."""
    return add(_kfc_matmuls(x, p.K1, p.K2), kfc_bias(p.b_c, p.b_h, p.b_w))


def kfc_dense_oracle(p: KFcParams, channel: int) -> np.ndarray:
    """Dense ``(H_out*W_out, H_in*W_in)`` matrix of one channel; test oracle only."""
    k1, k2 = value_of(p.K1), value_of(p.K2)
    if not 0 <= channel < k1.shape[0]:
        raise IndexError(channel)
    return np.kron(k1[channel], k2[channel].T)


# ---------------------------------------------------------------- budgets

@dataclass(frozen=True)
class OperatorBudget:
    """Parameter and arithmetic cost of one upscaling operator.

    ``flops`` counts a multiply-accumulate as two operations plus one per
    plain addition (``2 * macs + adds``); ``None`` when spatial dims were not
    given.
    """

    kind: str
    params: int
    kernel_params: int
    bias_params: int
    macs: int | None = None
    adds: int | None = None

    @property
    def flops(self) -> int | None:
        if self.macs is None:
            return None
        return 2 * self.macs + self.adds

    def as_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "kernel_params": self.kernel_params,
                "bias_params": self.bias_params, "macs": self.macs, "adds": self.adds,
                "flops": self.flops}


def _positive(*vals):
    if any(int(v) != v or v < 1 for v in vals):
        raise ValueError(f"counts must be positive integers, got {vals}")


def kfc_param_count(c: int, h_in: int, w_in: int, h_out: int, w_out: int) -> OperatorBudget:
    _positive(c, h_in, w_in, h_out, w_out)
    kernels = c * (h_out * h_in + w_in * w_out)
    bias = c + h_out + w_out
    macs, adds = _kfc_cost(c, h_in, w_in, h_out, w_out)
    return OperatorBudget("kfc", kernels + bias, kernels, bias, macs, adds)


def pixelshuffle_param_count(c: int, k: int, r: int, h: int | None = None,
                             w: int | None = None) -> OperatorBudget:
    """Conv expanding ``c`` to ``c*r^2`` channels ahead of a PixelShuffle by ``r``."""
    _positive(c, k, r)
    kernels = c * r * r * c * k * k
    bias = c * r * r
    macs = adds = None
    if h is not None and w is not None:
        macs, adds = _ps_cost(c, k, r, h, w)
    return OperatorBudget("pixelshuffle", kernels + bias, kernels, bias, macs, adds)


def _kfc_cost(c, h_in, w_in, h_out, w_out):
    return c * (h_out * h_in * w_in + h_out * w_in * w_out), c * h_out * w_out


def _ps_cost(c, k, r, h, w):
    return c * r * r * c * k * k * h * w, c * r * r * h * w


def operator_flops(kind: str, c: int, h_in: int, w_in: int, h_out: int, w_out: int,
                   k: int = 1) -> OperatorBudget:
    """Budget of an upscaler taking ``(c, h_in, w_in)`` to ``(c, h_out, w_out)``.

    ``k`` is the PixelShuffle conv kernel size; the other kinds ignore it.
    Deconv uses a ``r x r`` kernel with stride ``r``; bilinear has no weights
    and costs two taps per axis.
    """
    _positive(c, h_in, w_in, h_out, w_out, k)
    kind = kind.lower()
    if kind == "kfc":
        return kfc_param_count(c, h_in, w_in, h_out, w_out)
    r, rem_h = divmod(h_out, h_in)
    r_w, rem_w = divmod(w_out, w_in)
    if rem_h or rem_w or r != r_w:
        raise ValueError(f"{kind} needs one integer scale for both axes, got {h_in}x{w_in} -> {h_out}x{w_out}")
    if kind == "pixelshuffle":
        return pixelshuffle_param_count(c, k, r, h_in, w_in)
    if kind == "deconv":
        kernels, bias = c * c * r * r, c
        return OperatorBudget("deconv", kernels + bias, kernels, bias,
                              c * c * r * r * h_in * w_in, c * h_out * w_out)
    if kind == "bilinear":
        # horizontal pass on h_in rows, then vertical pass on all output pixels
        macs = c * (h_in * w_out * 2 + h_out * w_out * 2)
        return OperatorBudget("bilinear", 0, 0, 0, macs, 0)
    raise ValueError(f"unknown operator kind {kind!r}")


def budget_table(c: int, in_shape: tuple[int, int], out_shape: tuple[int, int],
                 k: int = 1) -> list[OperatorBudget]:
    """All four upscalers at one shape, KFc first."""
    (hi, wi), (ho, wo) = in_shape, out_shape
    return [operator_flops(kind, c, hi, wi, ho, wo, k) for kind in ("kfc", "pixelshuffle", "deconv", "bilinear")]
