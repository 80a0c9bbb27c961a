"""8-bit post-training compression of a decoder and its frame embeddings.

Every tensor is quantized on its own min-max range to uint8 codes. The
bitstream is::

    b"PNRQ" | u16 version | u32 n + n bytes JSON {"model", "frames", "meta"}
    | u32 count | count x decoder entry | u32 count | count x embedding entry

with each entry ``u16 len, name, u8 rank, rank x u32 dims, f64 min, f64 max,
prod(dims) x u8 codes``. All integers are little-endian. No entropy coding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binio
from .errors import FormatError
from .metrics import bpp, ms_ssim, ms_ssim_scales, psnr
from .model import EmbeddingSet, PNeRVModel, embed_all, fill_tensors, model_from_config_blob

__all__ = ["QuantEntry", "QuantizedBlob", "RateReport", "quantize_u8", "dequantize_u8",
           "quantize_model", "dequantize_model", "encode_bitstream", "decode_bitstream",
           "compress", "decompress", "rate_distortion", "RDPoint"]

MAGIC = b"PNRQ"
VERSION = 1
BITS = 8
LEVELS = 2 ** BITS - 1


@dataclass
class QuantEntry:
    lo: float
    hi: float
    codes: np.ndarray  # uint8, tensor shape

    @property
    def shape(self):
        return self.codes.shape

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / LEVELS


def quantize_u8(t) -> QuantEntry:
    """Min-max uniform quantization of one tensor to 256 levels."""
    v = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    if v.size == 0:
        return QuantEntry(0.0, 0.0, np.zeros(v.shape, dtype=np.uint8))
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return QuantEntry(lo, hi, np.zeros(v.shape, dtype=np.uint8))
    codes = np.rint((v - lo) / (hi - lo) * LEVELS)
    return QuantEntry(lo, hi, np.clip(codes, 0, LEVELS).astype(np.uint8))


def dequantize_u8(q: QuantEntry) -> np.ndarray:
    # interpolating between the endpoints keeps code 0 == lo and code 255 == hi exactly,
    # which makes re-quantizing a dequantized tensor reproduce the same entry
    a = q.codes.astype(np.float64) / LEVELS
    return q.lo * (1.0 - a) + q.hi * a


@dataclass
class QuantizedBlob:
    config: dict
    frames: int
    decoder: dict[str, QuantEntry]
    embeddings: dict[str, QuantEntry]
    meta: dict

    @property
    def n_values(self) -> int:
        return sum(q.codes.size for q in (*self.decoder.values(), *self.embeddings.values()))


def _embedding_table(emb: EmbeddingSet) -> dict[str, np.ndarray]:
    out = {}
    for t in range(emb.T):
        out[f"content.{t}"] = emb.content[t]
        if emb.temporal is not None:
            out[f"temporal.{t}"] = emb.temporal[t]
    return out


def quantize_model(model: PNeRVModel, embeddings: EmbeddingSet, meta: dict | None = None) -> QuantizedBlob:
    """Quantize the decoder tensors (in checkpoint order) and per-frame embeddings."""
    return QuantizedBlob(
        model.cfg.to_dict(), embeddings.T,
        {k: quantize_u8(v) for k, v in model.decoder_tensors().items()},
        {k: quantize_u8(v) for k, v in _embedding_table(embeddings).items()},
        dict(meta or {}),
    )


def dequantize_model(blob: QuantizedBlob) -> PNeRVModel:
    """Encoder-free model holding the dequantized decoder and embeddings."""
    base = model_from_config_blob({"model": blob.config})
    cfg = base.cfg
    t = blob.frames
    try:
        content = np.stack([dequantize_u8(blob.embeddings[f"content.{i}"]) for i in range(t)])
        temporal = (np.stack([dequantize_u8(blob.embeddings[f"temporal.{i}"]) for i in range(t)])
                    if cfg.has_shortcuts else None)
    except KeyError as exc:
        raise FormatError(f"missing embedding entry {exc}") from None
    table = {k: dequantize_u8(q) for k, q in blob.decoder.items()}
    table["emb.content"] = content
    if temporal is not None:
        table["emb.temporal"] = temporal
    return fill_tensors(base, table)


# ---------------------------------------------------------------- bitstream

def _entry_bytes(name: str, q: QuantEntry) -> bytes:
    return _binio.tensor_meta(name, q.shape) + struct.pack("<2d", q.lo, q.hi) + q.codes.tobytes()


def _read_entry(r: _binio.Reader) -> tuple[str, QuantEntry]:
    name, shape = _binio.read_tensor_meta(r)
    lo, hi = r.unpack("2d")
    if not lo <= hi:
        raise FormatError(f"entry {name}: min {lo} > max {hi}")
    n = int(np.prod(shape, dtype=np.int64))
    codes = np.frombuffer(r.take(n), dtype=np.uint8).reshape(shape).copy()
    return name, QuantEntry(lo, hi, codes)


def encode_bitstream(blob: QuantizedBlob) -> bytes:
    head = {"model": blob.config, "frames": blob.frames, "meta": blob.meta}
    parts = [_binio.header(MAGIC, VERSION, head)]
    for table in (blob.decoder, blob.embeddings):
        parts.append(struct.pack("<I", len(table)))
        parts.extend(_entry_bytes(k, q) for k, q in table.items())
    return b"".join(parts)


def decode_bitstream(data: bytes) -> QuantizedBlob:
    r = _binio.Reader(data)
    head = _binio.read_header(r, MAGIC, VERSION)
    tables = []
    for _ in range(2):
        tables.append(dict(_read_entry(r) for _ in range(r.unpack("I"))))
    r.expect_end()
    try:
        return QuantizedBlob(head["model"], int(head["frames"]), tables[0], tables[1], dict(head.get("meta", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad bitstream header: {exc}") from None


@dataclass
class RateReport:
    total_bits: int
    payload_bits: int
    header_bits: int
    n_values: int
    frames: int
    height: int
    width: int

    @property
    def bpp(self) -> float:
        return bpp(self.total_bits, 0, self.frames, self.height, self.width)

    @property
    def payload_bpp(self) -> float:
        return bpp(self.payload_bits, 0, self.frames, self.height, self.width)

    def as_dict(self) -> dict:
        return {"total_bits": self.total_bits, "payload_bits": self.payload_bits,
                "header_bits": self.header_bits, "n_values": self.n_values, "frames": self.frames,
                "height": self.height, "width": self.width, "bpp": self.bpp, "payload_bpp": self.payload_bpp}


def _rate(blob: QuantizedBlob, nbytes: int) -> RateReport:
    payload = BITS * blob.n_values
    h, w = model_from_config_blob({"model": blob.config}).cfg.output_hw
    return RateReport(8 * nbytes, payload, 8 * nbytes - payload, blob.n_values, blob.frames, h, w)


def compress(model: PNeRVModel, embeddings: EmbeddingSet, path, meta: dict | None = None) -> RateReport:
    """Quantize and write the ``PNRQ`` bitstream; returns its rate accounting."""
    blob = quantize_model(model, embeddings, meta)
    data = encode_bitstream(blob)
    Path(path).write_bytes(data)
    return _rate(blob, len(data))


def decompress(path) -> tuple[PNeRVModel, EmbeddingSet, dict]:
    blob = decode_bitstream(Path(path).read_bytes())
    model = dequantize_model(blob)
    return model, model.embeddings, blob.meta


@dataclass
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float | None
    psnr_unquantized: float
    rate: RateReport

    def as_dict(self) -> dict:
        return {"bpp": self.bpp, "psnr": self.psnr, "ms_ssim": self.ms_ssim,
                "psnr_unquantized": self.psnr_unquantized, "rate": self.rate.as_dict()}


def rate_distortion(model: PNeRVModel, frames, indices=None) -> RDPoint:
    """Quantize in memory, decode, and score against ``frames``.

    Rate covers the full bitstream (all frames); quality is averaged over
    ``indices`` (all frames by default).
    """
    from .trainer import reconstruct

    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    emb = embed_all(model, frames)
    blob = quantize_model(model, emb)
    rate = _rate(blob, len(encode_bitstream(blob)))
    idx = list(range(len(frames))) if indices is None else list(indices)
    quant = reconstruct(dequantize_model(blob), None, idx)
    plain = reconstruct(model, frames, idx)
    targets = frames[idx]
    q_psnr = float(np.mean([psnr(p, t) for p, t in zip(quant, targets)]))
    u_psnr = float(np.mean([psnr(p, t) for p, t in zip(plain, targets)]))
    ms = None
    if ms_ssim_scales(*frames.shape[-2:]) > 0:
        ms = float(np.mean([ms_ssim(np.clip(p, 0, 1), t) for p, t in zip(quant, targets)]))
    return RDPoint(rate.bpp, q_psnr, ms, u_psnr, rate)
