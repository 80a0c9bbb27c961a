"""Rate-of-dynamics profiling and the cascaded-decoder parameter bound.

A clip is treated as a function of the frame index. Its modulus of
continuity ``omega(delta)`` is the largest per-pixel RMS difference between
two frames at most ``delta`` apart; the dual modulus ``omega_inv(eps)`` is the
largest ``delta`` whose ``omega`` stays within ``eps``. Smooth clips have a
large ``omega_inv``.

The bound ``d_out**2 * (diam / omega_inv) ** (d_in + 1)`` is evaluated with
the suppressed big-O constant set to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = ["DynamicsProfile", "BoundQuery", "pairwise_rms", "modulus", "dynamics_profile",
           "dual_modulus", "param_bound", "rank_by_dynamics", "embedding_diameter"]

NORM = "per-pixel RMS"


def _frames(clip) -> np.ndarray:
    f = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
    if f.ndim < 2 or len(f) < 1:
        raise ValueError("clip must be a non-empty stack of frames")
    return f


def pairwise_rms(clip) -> np.ndarray:
    """``D[i, j]`` = RMS over all channels and pixels of ``frame_i - frame_j``."""
    f = _frames(clip).reshape(len(_frames(clip)), -1)
    n = len(f)
    d = np.zeros((n, n))
    for i in range(n):
        diff = f[i + 1 :] - f[i]
        d[i, i + 1 :] = np.sqrt(np.mean(diff * diff, axis=1))
    return d + d.T


@dataclass
class DynamicsProfile:
    omega: np.ndarray  # omega[delta - 1] for delta = 1 .. T-1
    frames: int
    norm: str = NORM

    def __call__(self, delta: int) -> float:
        if delta == 0:
            return 0.0
        if not 1 <= delta <= self.frames - 1:
            raise ValueError(f"delta {delta} outside [0, {self.frames - 1}]")
        return float(self.omega[delta - 1])

    def table(self) -> dict[int, float]:
        return {d: float(w) for d, w in enumerate(self.omega, start=1)}


def dynamics_profile(clip) -> DynamicsProfile:
    """omega(delta) for every delta, via a running max over diagonals of the distance matrix."""
    d = pairwise_rms(clip)
    n = len(d)
    per_gap = np.array([np.diagonal(d, k).max() for k in range(1, n)])
    return DynamicsProfile(np.maximum.accumulate(per_gap) if n > 1 else per_gap, n)


def modulus(clip, delta: int) -> float:
    n = len(_frames(clip))
    if not 1 <= delta <= n - 1:
        raise ValueError(f"delta must lie in [1, {n - 1}], got {delta}")
    return dynamics_profile(clip)(delta)


def dual_modulus(profile: DynamicsProfile, eps: float) -> int:
    """Largest delta in [0, T-1] with ``omega(delta) <= eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    # omega is nondecreasing, so the admissible deltas form a prefix
    return int(np.count_nonzero(profile.omega <= eps))


@dataclass(frozen=True)
class BoundQuery:
    d_in: int
    d_out: int
    diam: float
    omega_inv: float
    epsilon: float | None = None

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1 or self.diam <= 0 or self.omega_inv < 0:
            raise ValueError(f"invalid bound query {self}")
        if self.omega_inv > self.diam:
            raise ValueError(f"omega_inv {self.omega_inv} exceeds diam {self.diam}")


def param_bound(q: BoundQuery) -> int | float:
    """``ceil(d_out^2 * (diam / omega_inv)^(d_in + 1))``; ``inf`` when omega_inv is 0.

    Evaluated in exact rational arithmetic so integer ratios give exact counts.
    """
    if q.omega_inv == 0:
        return math.inf
    ratio = Fraction(q.diam) / Fraction(q.omega_inv)
    return math.ceil(q.d_out ** 2 * ratio ** (q.d_in + 1))


def rank_by_dynamics(clips: Mapping[str, object] | Sequence[tuple[str, object]], eps: float) -> list[str]:
    """Names sorted smoothest first (descending omega_inv), ties by name."""
    items = list(clips.items()) if isinstance(clips, Mapping) else list(clips)
    if len(items) < 2:
        raise ValueError("need at least two clips to rank")
    if len({len(_frames(c)) for _, c in items}) != 1:
        raise ValueError("clips must have equal frame counts")
    scored = [(dual_modulus(dynamics_profile(c), eps), name) for name, c in items]
    return [name for _, name in sorted(scored, key=lambda s: (-s[0], s[1]))]


def embedding_diameter(embeddings: Iterable[np.ndarray]) -> float:
    """Max pairwise L2 distance among flattened per-frame embeddings."""
    e = np.stack([np.ravel(x) for x in embeddings])
    sq = np.sum(e * e, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * e @ e.T, 0.0)
    return float(np.sqrt(d2.max()))
