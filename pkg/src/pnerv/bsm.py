"""Gated fusion of a shortcut stream into the mainstream.

The BSM unit computes

    n = W_n * z                      (shortcut features projected to C channels)
    m = W_m * h_prev
    s = sigmoid(W_s * relu(n + m))   (gate)
    h = h_prev * (1 - s) + n * s

``m`` only reaches the output through the gate. A concat-then-1x1-conv
fusion is provided as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import ops
from .ops import value_of

__all__ = ["BSMParams", "ConcatParams", "bsm_gate", "bsm_combine", "bsm_forward", "concat_fusion"]


@dataclass
class BSMParams:
    n_weight: Any  # (C, c_shortcut, k, k)
    n_bias: Any
    m_weight: Any  # (C, C, k, k)
    m_bias: Any
    s_weight: Any  # (C, C, k, k)
    s_bias: Any

    @classmethod
    def init(cls, rng: np.random.Generator, shortcut_channels: int, channels: int,
             kernel: int = 3) -> "BSMParams":
        fan_out = channels * kernel * kernel

        def w(cin):
            return ops.kaiming_normal(rng, (channels, cin, kernel, kernel), fan_out)

        z = np.zeros(channels)
        return cls(w(shortcut_channels), z.copy(), w(channels), z.copy(), w(channels), z.copy())

    def arrays(self) -> dict[str, Any]:
        return dict(vars(self))


@dataclass
class ConcatParams:
    weight: Any  # (C, C + c_shortcut, 1, 1)
    bias: Any

    @classmethod
    def init(cls, rng: np.random.Generator, shortcut_channels: int, channels: int) -> "ConcatParams":
        shape = (channels, channels + shortcut_channels, 1, 1)
        return cls(ops.kaiming_normal(rng, shape, channels), np.zeros(channels))

    def arrays(self) -> dict[str, Any]:
        return dict(vars(self))


def bsm_gate(z, h_prev, p: BSMParams):
    """Return the projected shortcut ``n`` and the gate ``s``."""
    zv, hv = value_of(z), value_of(h_prev)
    if zv.shape[1:] != hv.shape[1:]:
        raise ValueError(f"spatial mismatch between shortcut {zv.shape} and mainstream {hv.shape}")
    n = ops.conv2d(z, p.n_weight, p.n_bias)
    m = ops.conv2d(h_prev, p.m_weight, p.m_bias)
    s = ops.sigmoid(ops.conv2d(ops.relu(ops.add(n, m)), p.s_weight, p.s_bias))
    return n, s


def bsm_combine(h_prev, n, s):
    """Elementwise convex combination ``h_prev * (1 - s) + n * s``."""
    hv, nv, sv = value_of(h_prev), value_of(n), value_of(s)
    if not hv.shape == nv.shape == sv.shape:
        raise ValueError(f"shape mismatch {hv.shape}, {nv.shape}, {sv.shape}")
    if sv.size and (sv.min() < 0.0 or sv.max() > 1.0):
        raise ValueError("gate values must lie in [0, 1]")
    return ops.add(ops.mul(h_prev, ops.sub(1.0, s)), ops.mul(n, s))


def bsm_forward(z, h_prev, p: BSMParams, gate_override: float | None = None):
    """Fuse shortcut ``z`` into ``h_prev``.

    ``gate_override`` replaces the computed gate by a constant, e.g. ``0.0``
    to switch the shortcut off entirely.
    """
    n, s = bsm_gate(z, h_prev, p)
    if gate_override is not None:
        s = np.full(value_of(s).shape, float(gate_override))
    return bsm_combine(h_prev, n, s)


def concat_fusion(z, h_prev, p: ConcatParams):
    zv, hv = value_of(z), value_of(h_prev)
    if zv.shape[1:] != hv.shape[1:]:
        raise ValueError(f"spatial mismatch between shortcut {zv.shape} and mainstream {hv.shape}")
    return ops.conv2d(ops.concat([h_prev, z]), p.weight, p.bias)
