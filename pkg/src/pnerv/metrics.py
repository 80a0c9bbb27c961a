"""Reconstruction quality metrics on ``[0, 1]`` float frames."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["psnr", "ssim", "ms_ssim", "ms_ssim_scales", "bpp", "QualityReport", "quality_report",
           "PSNR_CAP", "MS_SSIM_WEIGHTS"]

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN = 11
_SIGMA = 1.5


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB with peak 1 after clamping both inputs to [0, 1]; 99 dB if identical."""
    a, b = _pair(a, b)
    mse = float(np.mean((np.clip(a, 0, 1) - np.clip(b, 0, 1)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = _WIN, sigma: float = _SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    # separable 'valid' correlation over the last two axes
    k = len(g)
    x = sliding_window_view(x, k, axis=-1) @ g
    x = np.swapaxes(sliding_window_view(np.swapaxes(x, -1, -2), k, axis=-1) @ g, -1, -2)
    return x


def _ssim_terms(a, b, data_range=1.0, k1=0.01, k2=0.03):
    """Mean SSIM and mean contrast-structure term, per channel."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return (lum * cs).mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def _as_chw(a):
    return a[None] if a.ndim == 2 else a


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM (11-tap Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    a, b = _as_chw(a), _as_chw(b)
    if min(a.shape[-2:]) < _WIN:
        raise ValueError(f"frame {a.shape[-2:]} smaller than the {_WIN}x{_WIN} SSIM window")
    s, _ = _ssim_terms(a, b, data_range)
    return float(s.mean())


def ms_ssim_scales(height: int, width: int) -> int:
    """Scales usable for a frame: the coarsest level must still fit the window."""
    n = 0
    while n < len(MS_SSIM_WEIGHTS) and min(height, width) // (2 ** n) >= _WIN:
        n += 1
    return n


def _avg_pool2(x):
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with 2x2 average-pool downsampling.

    Uses up to five scales; smaller frames use fewer, with the leading
    weights renormalised to sum to one. Negative per-scale terms are clipped
    to zero so the result stays in [0, 1].
    """
    a, b = _pair(a, b)
    a, b = _as_chw(a), _as_chw(b)
    n = ms_ssim_scales(*a.shape[-2:])
    if n == 0:
        raise ValueError(f"frame {a.shape[-2:]} smaller than the {_WIN}x{_WIN} SSIM window")
    if n < len(MS_SSIM_WEIGHTS):
        log.info("ms_ssim: %s frame supports %d of %d scales", a.shape[-2:], n, len(MS_SSIM_WEIGHTS))
    w = np.array(MS_SSIM_WEIGHTS[:n])
    w = w / w.sum()
    vals = []
    for i in range(n):
        s, cs = _ssim_terms(a, b, data_range)
        vals.append(s if i == n - 1 else cs)
        if i < n - 1:
            a, b = _avg_pool2(a), _avg_pool2(b)
    terms = np.clip(np.stack(vals), 0.0, None)  # (scales, channels)
    per_channel = np.prod(terms ** w[:, None], axis=0)
    return float(per_channel.mean())


def bpp(model_bits: int, embedding_bits: int, frames: int, height: int, width: int) -> float:
    if min(frames, height, width) < 1:
        raise ValueError("video dimensions must be positive")
    return (model_bits + embedding_bits) / (frames * height * width)


@dataclass
class QualityReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float | None] = field(default_factory=list)
    ms_ssim: list[float | None] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)

    @staticmethod
    def _mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def as_dict(self) -> dict:
        return {
            "frames": list(self.frames),
            "psnr": list(self.psnr),
            "ssim": list(self.ssim),
            "ms_ssim": list(self.ms_ssim),
            "avg_psnr": self._mean(self.psnr),
            "avg_ssim": self._mean(self.ssim),
            "avg_ms_ssim": self._mean(self.ms_ssim),
        }


def quality_report(preds, targets, frame_ids=None) -> QualityReport:
    """Per-frame PSNR/SSIM/MS-SSIM; the SSIM family is ``None`` for frames below 11 px."""
    rep = QualityReport()
    for i, (p, t) in enumerate(zip(preds, targets)):
        p = np.clip(np.asarray(p, dtype=np.float64), 0, 1)
        t = np.asarray(t, dtype=np.float64)
        rep.frames.append(i if frame_ids is None else int(frame_ids[i]))
        rep.psnr.append(psnr(p, t))
        small = min(t.shape[-2:]) < _WIN
        rep.ssim.append(None if small else ssim(p, t))
        rep.ms_ssim.append(None if small else ms_ssim(p, t))
    return rep
