"""Little-endian helpers shared by the checkpoint and bitstream formats."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def header(magic: bytes, version: int, config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<HI", version, len(blob)) + blob


def read_header(r: Reader, magic: bytes, version: int) -> dict:
    got = r.take(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    ver, n = r.unpack("HI")
    if ver != version:
        raise FormatError(f"unsupported version {ver}, expected {version}")
    try:
        return json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config blob is not valid JSON: {exc}") from None


def tensor_meta(name: str, shape: tuple[int, ...]) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def read_tensor_meta(r: Reader) -> tuple[str, tuple[int, ...]]:
    n = r.unpack("H")
    try:
        name = r.take(n).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("tensor name is not UTF-8") from None
    rank = r.unpack("B")
    shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
    return name, shape


def f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read_f64(r: Reader, shape) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    return np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
