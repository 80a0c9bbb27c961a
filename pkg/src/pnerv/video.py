"""Video clips, raw ``.rgbv`` / PPM-directory I/O and synthetic test clips.

``.rgbv`` layout (little-endian): ``b"RGBV"``, u32 T, u32 H, u32 W, then
``T*H*W*3`` bytes, frame-major, each frame row-major with interleaved RGB.
PPM directories hold binary P6 files named ``frame_00001.ppm`` onward.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = [
    "VideoClip", "load_video", "save_video", "center_crop_1x2", "to_codes", "from_codes",
    "read_ppm", "write_ppm", "moving_gradient_clip", "constant_clip", "ramp_clip",
]

RGBV_MAGIC = b"RGBV"
PPM_NAME = "frame_{:05d}.ppm"


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, 3, H, W) float64 in [0, 1]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or len(self.frames) < 1:
            raise ValueError(f"clip frames must be (T>=1, 3, H, W), got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[2]

    @property
    def W(self) -> int:
        return self.frames.shape[3]

    def __len__(self):
        return self.T


def to_codes(frames: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, clamped, rounding half away from zero."""
    v = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def from_codes(codes: np.ndarray) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / 255.0


def center_crop_1x2(frames: np.ndarray) -> np.ndarray:
    """Crop ``(..., H, W)`` to the largest centred window with ``W == 2 * H``."""
    h, w = frames.shape[-2:]
    if w == 2 * h:
        return frames
    if w > 2 * h:
        nh, nw = h, 2 * h
    else:
        nh = w // 2
        nw = 2 * nh
    if nh < 1:
        raise FormatError(f"cannot crop a {h}x{w} frame to a 1:2 aspect")
    top, left = (h - nh) // 2, (w - nw) // 2
    return frames[..., top : top + nh, left : left + nw]


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval 255 to ``(H, W, 3)`` uint8."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: bad magic {tokens[0]!r}, only binary P6 is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-integer PPM header field") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def _read_rgbv(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RGBV_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    t, h, w = struct.unpack("<3I", data[4:16])
    n = t * h * w * 3
    if len(data) != 16 + n:
        raise FormatError(f"{path}: expected {n} pixel bytes, found {len(data) - 16}")
    if t < 1:
        raise FormatError(f"{path}: empty clip")
    return np.frombuffer(data[16:], dtype=np.uint8).reshape(t, h, w, 3)


def _read_ppm_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("frame_*.ppm"))
    if not files:
        raise FormatError(f"{path}: no frame_*.ppm files")
    frames = [read_ppm(f) for f in files]
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{path}: inconsistent frame dimensions")
    return np.stack(frames)


def load_video(path) -> VideoClip:
    """Load a ``.rgbv`` file or PPM directory, centre-cropped to a 1:2 aspect."""
    path = Path(path)
    codes = _read_ppm_dir(path) if path.is_dir() else _read_rgbv(path)
    frames = from_codes(codes.transpose(0, 3, 1, 2))
    return VideoClip(np.ascontiguousarray(center_crop_1x2(frames)))


def save_video(clip: VideoClip | np.ndarray, path) -> None:
    """Write ``.rgbv`` when ``path`` ends with that suffix, else a PPM directory."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    codes = to_codes(frames).transpose(0, 2, 3, 1)
    path = Path(path)
    if path.suffix == ".rgbv":
        t, h, w, _ = codes.shape
        path.write_bytes(RGBV_MAGIC + struct.pack("<3I", t, h, w) + np.ascontiguousarray(codes).tobytes())
        return
    path.mkdir(parents=True, exist_ok=True)
    for i, rgb in enumerate(codes, start=1):
        write_ppm(path / PPM_NAME.format(i), rgb)


# ---------------------------------------------------------------- synthetic clips

def moving_gradient_clip(frames: int = 8, height: int = 32, width: int = 64, seed: int = 0,
                         speed: float = 0.25) -> VideoClip:
    """Smooth per-channel sinusoidal gradients drifting by ``speed`` rad/frame."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width]
    y, x = y / height, x / width
    out = np.empty((frames, 3, height, width))
    freq = rng.uniform(0.5, 1.5, size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    for t in range(frames):
        for c in range(3):
            arg = 2 * np.pi * (freq[c, 0] * x + freq[c, 1] * y) + phase[c] + speed * t
            out[t, c] = 0.5 + 0.4 * np.sin(arg)
    return VideoClip(out)


def constant_clip(frames: int = 4, height: int = 8, width: int = 16, value: float = 0.5) -> VideoClip:
    return VideoClip(np.full((frames, 3, height, width), float(value)))


def ramp_clip(frames: int = 8, height: int = 2, width: int = 4, step: float = 1 / 64) -> VideoClip:
    """Frame ``t`` is the constant ``t * step``; RMS gap between frames i, j is ``|i-j| * step``."""
    return VideoClip(np.arange(frames, dtype=np.float64)[:, None, None, None] * step
                     * np.ones((1, 3, height, width)))
