"""The PNeRV encoder/decoder.

The decoder is a mainstream of six upsampling blocks (conv, PixelShuffle,
GELU) fed by the content embedding. In variant ``"L"`` a temporal embedding
is upscaled by a shortcut (KFc, batch norm, GELU) to the resolution of each
of layers 2-5 and fused into the mainstream. A 1x1 conv maps the last layer
to RGB. Variant ``"M"`` has no shortcuts and is a plain serial cascade.

Both embeddings come from small strided-conv encoders: the content encoder
sees frame ``t``, the temporal encoder sees the symmetric frame difference
``(V[t+1] - V[t-1]) / 2`` with indices clamped to the clip.

Frame indices are 0-based throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import _binio, ops
from .bsm import BSMParams, ConcatParams, bsm_forward, concat_fusion
from .errors import ConfigError, FormatError
from .kfc import KFcParams, kfc_forward

__all__ = [
    "PNeRVConfig", "PNeRVModel", "EmbeddingSet", "ParamCount", "build_model", "encode", "embed_all",
    "frame_difference",
    "decode_frame", "count_params", "save_checkpoint", "load_checkpoint",
    "NUM_LAYERS", "SHORTCUT_LAYERS",
]

NUM_LAYERS = 6
SHORTCUT_LAYERS = (2, 3, 4, 5)
CHECKPOINT_MAGIC = b"PNRV"
CHECKPOINT_VERSION = 1

VARIANTS = ("M", "L")
FUSIONS = ("BSM", "Concat")
UPSCALERS = ("KFc", "Deconv", "Bilinear")
BN_STATS = ("frame", "running")


@dataclass
class PNeRVConfig:
    variant: str = "L"
    embed_content_shape: tuple[int, int, int] = (16, 2, 4)
    embed_temporal_shape: tuple[int, int, int] = (2, 8, 16)
    mainstream_strides: tuple[int, ...] = (2, 2, 2, 2, 2, 1)
    channel_widths: tuple[int, ...] = (32, 32, 16, 16, 8, 8)
    fusion_kind: str = "BSM"
    upscaler_kind: str = "KFc"
    block_kernel: int = 3
    first_kernel: int = 1
    bsm_kernel: int = 3
    encoder_width: int = 16
    bn_stats: str = "frame"
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_content_shape", "embed_temporal_shape", "mainstream_strides", "channel_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @classmethod
    def from_dict(cls, d: Mapping) -> "PNeRVConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion_kind not in FUSIONS:
            raise ConfigError(f"fusion_kind must be one of {FUSIONS}, got {self.fusion_kind!r}")
        if self.bn_stats not in BN_STATS:
            raise ConfigError(f"bn_stats must be one of {BN_STATS}, got {self.bn_stats!r}")
        if self.upscaler_kind not in UPSCALERS:
            raise ConfigError(f"upscaler_kind must be one of {UPSCALERS}, got {self.upscaler_kind!r}")
        if len(self.mainstream_strides) != NUM_LAYERS or len(self.channel_widths) != NUM_LAYERS:
            raise ConfigError(f"need exactly {NUM_LAYERS} mainstream strides and widths")
        if min(self.mainstream_strides) < 1 or min(self.channel_widths) < 1:
            raise ConfigError("strides and widths must be positive")
        if len(self.embed_content_shape) != 3 or len(self.embed_temporal_shape) != 3:
            raise ConfigError("embedding shapes must be (C, H, W)")
        for k in (self.block_kernel, self.first_kernel, self.bsm_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        _, eh, ew = self.embed_content_shape
        if ew != 2 * eh:
            raise ConfigError(f"content embedding must have a 1:2 aspect, got {eh}x{ew}")
        if self.variant == "L":
            ct, th, tw = self.embed_temporal_shape
            h_out, w_out = self.output_hw
            if h_out % th or w_out % tw or h_out // th != w_out // tw:
                raise ConfigError(f"temporal embedding {th}x{tw} must divide the output {h_out}x{w_out} evenly")
            if self.upscaler_kind != "KFc":
                for l in SHORTCUT_LAYERS:
                    h, w = self.layer_hw(l)
                    if h % th or w % tw or h // th != w // tw:
                        raise ConfigError(f"{self.upscaler_kind} shortcut needs an integer scale from "
                                          f"{th}x{tw} to layer {l} ({h}x{w})")

    def layer_hw(self, layer: int) -> tuple[int, int]:
        """Spatial size after mainstream layer ``layer`` (0 = embedding)."""
        _, h, w = self.embed_content_shape
        scale = math.prod(self.mainstream_strides[:layer])
        return h * scale, w * scale

    @property
    def output_hw(self) -> tuple[int, int]:
        return self.layer_hw(NUM_LAYERS)

    @property
    def has_shortcuts(self) -> bool:
        return self.variant == "L"


@dataclass
class EmbeddingSet:
    """Per-frame embeddings: ``content`` is (T, C, h, w), ``temporal`` likewise or ``None``."""

    content: np.ndarray
    temporal: np.ndarray | None = None

    def __post_init__(self):
        self.content = np.asarray(self.content, dtype=np.float64)
        if self.temporal is not None:
            self.temporal = np.asarray(self.temporal, dtype=np.float64)
            if len(self.temporal) != len(self.content):
                raise ValueError("content and temporal embeddings disagree on frame count")

    @property
    def T(self) -> int:
        return len(self.content)

    def frame(self, t: int):
        if not 0 <= t < self.T:
            raise IndexError(f"frame index {t} out of range for {self.T} embedded frames")
        return self.content[t], None if self.temporal is None else self.temporal[t]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"emb.content": self.content}
        if self.temporal is not None:
            out["emb.temporal"] = self.temporal
        return out


@dataclass
class PNeRVModel:
    """Config plus named arrays.

    ``params`` are trainable, ``buffers`` hold batch-norm running statistics.
    A model restored from a bitstream has no ``enc.*`` params and carries its
    frames' ``embeddings`` instead.
    """

    cfg: PNeRVConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    embeddings: EmbeddingSet | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        """Every stored array (parameters, buffers, embeddings) in a fixed order."""
        emb = {} if self.embeddings is None else self.embeddings.arrays()
        return {**self.params, **self.buffers, **emb}

    def decoder_names(self) -> list[str]:
        return [k for k in self.tensors() if k.startswith("dec.")]

    def encoder_names(self) -> list[str]:
        return [k for k in self.tensors() if k.startswith("enc.")]

    @property
    def has_encoder(self) -> bool:
        return any(k.startswith("enc.") for k in self.params)

    def decoder_tensors(self) -> dict[str, np.ndarray]:
        t = self.tensors()
        return {k: t[k] for k in self.decoder_names()}

    def copy(self) -> "PNeRVModel":
        emb = None
        if self.embeddings is not None:
            e = self.embeddings
            emb = EmbeddingSet(e.content.copy(), None if e.temporal is None else e.temporal.copy())
        return PNeRVModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()}, emb)


# ---------------------------------------------------------------- construction

def _prime_strides(n: int) -> list[int]:
    out, p = [], 2
    while n > 1:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    return out


def _encoder_strides(cfg: PNeRVConfig, path: str) -> list[int]:
    h_out, _ = cfg.output_hw
    if path == "content":
        return [s for s in reversed(cfg.mainstream_strides) if s > 1]
    return sorted(_prime_strides(h_out // cfg.embed_temporal_shape[1]), reverse=True)


def _add_conv(params, rng, name, cin, cout, k):
    params[f"{name}.weight"] = ops.kaiming_normal(rng, (cout, cin, k, k), cout * k * k)
    params[f"{name}.bias"] = np.zeros(cout)


def build_model(cfg: PNeRVConfig) -> PNeRVModel:
    """Initialise every tensor deterministically from ``cfg.seed``.

    Kernels get Kaiming-normal (fan-out) init, biases zeros, batch-norm
    scale one / shift zero / running variance one.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    paths = ["content"] + (["temporal"] if cfg.has_shortcuts else [])
    for path in paths:
        out_c = cfg.embed_content_shape[0] if path == "content" else cfg.embed_temporal_shape[0]
        cin = 3
        for i, _ in enumerate(_encoder_strides(cfg, path)):
            _add_conv(params, rng, f"enc.{path}.{i}", cin, cfg.encoder_width, 3)
            cin = cfg.encoder_width
        _add_conv(params, rng, f"enc.{path}.out", cin, out_c, 3)

    cin = cfg.embed_content_shape[0]
    ct, th, tw = cfg.embed_temporal_shape
    for l in range(1, NUM_LAYERS + 1):
        r, width = cfg.mainstream_strides[l - 1], cfg.channel_widths[l - 1]
        k = cfg.first_kernel if l == 1 else cfg.block_kernel
        _add_conv(params, rng, f"dec.block{l}", cin, width * r * r, k)
        cin = width
        if not (cfg.has_shortcuts and l in SHORTCUT_LAYERS):
            continue
        h, w = cfg.layer_hw(l)
        pre = f"dec.shortcut{l}"
        if cfg.upscaler_kind == "KFc":
            for name, arr in KFcParams.init(rng, ct, (th, tw), (h, w)).arrays().items():
                params[f"{pre}.{name}"] = arr
        elif cfg.upscaler_kind == "Deconv":
            s = h // th
            params[f"{pre}.weight"] = ops.kaiming_normal(rng, (ct, ct, s, s), ct * s * s)
            params[f"{pre}.bias"] = np.zeros(ct)
        params[f"{pre}.bn.weight"] = np.ones(ct)
        params[f"{pre}.bn.bias"] = np.zeros(ct)
        buffers[f"{pre}.bn.running_mean"] = np.zeros(ct)
        buffers[f"{pre}.bn.running_var"] = np.ones(ct)
        fuse = (BSMParams.init(rng, ct, width, cfg.bsm_kernel) if cfg.fusion_kind == "BSM"
                else ConcatParams.init(rng, ct, width))
        for name, arr in fuse.arrays().items():
            params[f"dec.fuse{l}.{name}"] = arr
    _add_conv(params, rng, "dec.head", cin, 3, 1)
    return PNeRVModel(cfg, params, buffers)


# ---------------------------------------------------------------- forward

def frame_difference(frames: np.ndarray, t: int) -> np.ndarray:
    """``(V[t+1] - V[t-1]) / 2`` with neighbours clamped to the clip."""
    n = len(frames)
    return (frames[min(t + 1, n - 1)] - frames[max(t - 1, 0)]) / 2.0


def _run_encoder(params, cfg, path, x):
    for i, s in enumerate(_encoder_strides(cfg, path)):
        x = ops.gelu(ops.conv2d(x, params[f"enc.{path}.{i}.weight"], params[f"enc.{path}.{i}.bias"],
                                stride=s, padding=1))
    return ops.conv2d(x, params[f"enc.{path}.out.weight"], params[f"enc.{path}.out.bias"])


def encode(model: PNeRVModel, frames: np.ndarray, t: int, params: Mapping | None = None):
    """Content and temporal (variant L, else ``None``) embeddings of frame ``t``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected frames of shape (T, 3, H, W), got {frames.shape}")
    if not 0 <= t < len(frames):
        raise IndexError(f"frame index {t} out of range for {len(frames)} frames")
    cfg = model.cfg
    if frames.shape[2:] != cfg.output_hw:
        raise ValueError(f"frames are {frames.shape[2:]}, model expects {cfg.output_hw}")
    p = model.params if params is None else params
    if params is None and not model.has_encoder:
        raise ValueError("model has no encoder; use its stored embeddings")
    content = _run_encoder(p, cfg, "content", frames[t])
    temporal = _run_encoder(p, cfg, "temporal", frame_difference(frames, t)) if cfg.has_shortcuts else None
    return content, temporal


def embed_all(model: PNeRVModel, frames: np.ndarray | None = None) -> EmbeddingSet:
    """Embeddings of every frame: stored ones if present, else from the encoder."""
    if model.embeddings is not None:
        if frames is not None and len(frames) != model.embeddings.T:
            raise ValueError(f"model stores {model.embeddings.T} frame embeddings, clip has {len(frames)} frames")
        return model.embeddings
    if frames is None:
        raise ValueError("frames are required to run the encoder")
    pairs = [encode(model, frames, t) for t in range(len(frames))]
    temporal = np.stack([z for _, z in pairs]) if model.cfg.has_shortcuts else None
    return EmbeddingSet(np.stack([c for c, _ in pairs]), temporal)


def _shortcut(params, buffers, cfg, layer, x, training, update_stats):
    pre = f"dec.shortcut{layer}"
    h, w = cfg.layer_hw(layer)
    if cfg.upscaler_kind == "KFc":
        names = ("K1", "K2", "b_c", "b_h", "b_w")
        z = kfc_forward(x, KFcParams(*(params[f"{pre}.{n}"] for n in names)))
    elif cfg.upscaler_kind == "Deconv":
        s = h // ops.value_of(x).shape[1]
        z = ops.deconv2d(x, params[f"{pre}.weight"], params[f"{pre}.bias"], stride=s)
    else:
        z = ops.bilinear_upsample(x, h // ops.value_of(x).shape[1])
    z = ops.batch_norm2d(z, params[f"{pre}.bn.weight"], params[f"{pre}.bn.bias"],
                         buffers[f"{pre}.bn.running_mean"], buffers[f"{pre}.bn.running_var"],
                         training=training, update_stats=update_stats)
    return ops.gelu(z)


def decode_frame(model: PNeRVModel, content, temporal=None, *, params: Mapping | None = None,
                 training: bool = False, update_stats: bool = False,
                 gate_override: float | None = None):
    """Decode one frame from its embeddings into a ``(3, H, W)`` tensor.

    ``params`` substitutes the model's arrays (e.g. tape Vars during training).
    Shortcut batch norm normalises with the frame's own statistics when
    ``training`` is set or ``cfg.bn_stats == "frame"``, and with the running
    averages otherwise; ``update_stats`` (training only) folds the frame
    statistics into the running averages.
    ``gate_override`` forces every BSM gate to a constant.
    """
    cfg = model.cfg
    p = model.params if params is None else params
    if tuple(ops.value_of(content).shape) != cfg.embed_content_shape:
        raise ValueError(f"content embedding {ops.value_of(content).shape} != {cfg.embed_content_shape}")
    if cfg.has_shortcuts:
        if temporal is None or tuple(ops.value_of(temporal).shape) != cfg.embed_temporal_shape:
            raise ValueError(f"variant L needs a temporal embedding of shape {cfg.embed_temporal_shape}")

    h = content
    for l in range(1, NUM_LAYERS + 1):
        r = cfg.mainstream_strides[l - 1]
        k = cfg.first_kernel if l == 1 else cfg.block_kernel
        prev_hw = ops.value_of(h).shape[1:]
        h = ops.gelu(ops.pixel_shuffle(ops.conv2d(h, p[f"dec.block{l}.weight"], p[f"dec.block{l}.bias"],
                                                  padding=(k - 1) // 2), r))
        hw = ops.value_of(h).shape[1:]
        if hw != (prev_hw[0] * r, prev_hw[1] * r):
            raise ValueError(f"layer {l} shape chain broken: {prev_hw} -> {hw}")
        if cfg.has_shortcuts and l in SHORTCUT_LAYERS:
            z = _shortcut(p, model.buffers, cfg, l, temporal, training or cfg.bn_stats == "frame",
                          training and update_stats)
            pre = f"dec.fuse{l}"
            if cfg.fusion_kind == "BSM":
                fuse = BSMParams(*(p[f"{pre}.{n}"] for n in
                                   ("n_weight", "n_bias", "m_weight", "m_bias", "s_weight", "s_bias")))
                h = bsm_forward(z, h, fuse, gate_override=gate_override)
            else:
                h = concat_fusion(z, h, ConcatParams(p[f"{pre}.weight"], p[f"{pre}.bias"]))
    return ops.conv2d(h, p["dec.head.weight"], p["dec.head.bias"])


# ---------------------------------------------------------------- accounting

@dataclass(frozen=True)
class ParamCount:
    decoder: int
    encoder: int
    embeddings: int

    @property
    def total(self) -> int:
        return self.decoder + self.encoder + self.embeddings


def count_params(model: PNeRVModel | Mapping[str, np.ndarray] | None,
                 embeddings: EmbeddingSet | Mapping[str, np.ndarray] | np.ndarray | None = None) -> ParamCount:
    """Element counts of every stored tensor, split by role.

    A plain mapping of arrays counts entirely as decoder. Batch-norm running
    statistics are stored with the decoder and are counted there. Embeddings
    stored on the model are counted unless ``embeddings`` is given.
    """
    dec = enc = 0
    if isinstance(model, PNeRVModel):
        tensors = model.tensors()
        dec = sum(tensors[k].size for k in model.decoder_names())
        enc = sum(tensors[k].size for k in model.encoder_names())
        if embeddings is None:
            embeddings = model.embeddings
    elif model is not None:
        dec = sum(np.asarray(ops.value_of(v)).size for v in model.values())
    if embeddings is None:
        emb = 0
    elif isinstance(embeddings, EmbeddingSet):
        emb = sum(v.size for v in embeddings.arrays().values())
    elif isinstance(embeddings, Mapping):
        emb = sum(np.asarray(v).size for v in embeddings.values())
    else:
        emb = int(np.asarray(embeddings).size)
    return ParamCount(int(dec), int(enc), int(emb))


# ---------------------------------------------------------------- checkpoint

def _checkpoint_bytes(model: PNeRVModel, meta: Mapping | None) -> bytes:
    blob = {"model": model.cfg.to_dict(), "meta": dict(meta or {})}
    parts = [_binio.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, blob)]
    tensors = model.tensors()
    parts.append(len(tensors).to_bytes(4, "little"))
    for name, arr in tensors.items():
        parts.append(_binio.tensor_meta(name, arr.shape))
        parts.append(_binio.f64_bytes(arr))
    return b"".join(parts)


def save_checkpoint(model: PNeRVModel, path, meta: Mapping | None = None) -> None:
    """Write the versioned ``PNRV`` checkpoint; ``meta`` is stored in the config blob."""
    Path(path).write_bytes(_checkpoint_bytes(model, meta))


def model_from_config_blob(blob: Mapping) -> PNeRVModel:
    try:
        cfg = PNeRVConfig.from_dict(blob["model"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"bad model config in header: {exc}") from None
    return build_model(cfg)


def fill_tensors(model: PNeRVModel, table: Mapping[str, np.ndarray]) -> PNeRVModel:
    """Replace the tensors of a freshly built ``model`` by ``table``.

    Decoder tensors must match the config exactly. Encoder tensors are
    either all present or all absent; ``emb.*`` embeddings are optional.
    """
    expected = model.tensors()
    names = [k for k in table if not k.startswith("emb.")]
    want = list(expected)
    if not any(k.startswith("enc.") for k in names):
        want = [k for k in want if not k.startswith("enc.")]
    if names != want:
        missing, extra = set(want) - set(names), set(names) - set(want)
        raise FormatError(f"tensor table does not match config (missing {sorted(missing)}, extra {sorted(extra)})")
    for name in names:
        if table[name].shape != expected[name].shape:
            raise FormatError(f"tensor {name} has shape {table[name].shape}, config implies {expected[name].shape}")
    params = {k: np.array(table[k]) for k in model.params if k in table}
    buffers = {k: np.array(table[k]) for k in model.buffers}
    emb = None
    if "emb.content" in table:
        cfg = model.cfg
        content, temporal = table["emb.content"], table.get("emb.temporal")
        if content.shape[1:] != cfg.embed_content_shape or (cfg.has_shortcuts and (
                temporal is None or temporal.shape[1:] != cfg.embed_temporal_shape)):
            raise FormatError("stored embeddings do not match the config's embedding shapes")
        emb = EmbeddingSet(np.array(content), None if temporal is None else np.array(temporal))
    elif "emb.temporal" in table:
        raise FormatError("temporal embeddings stored without content embeddings")
    if not any(k.startswith("enc.") for k in params) and emb is None:
        raise FormatError("checkpoint has neither an encoder nor stored embeddings")
    return PNeRVModel(model.cfg, params, buffers, emb)


def load_checkpoint(path) -> tuple[PNeRVModel, dict]:
    """Read a checkpoint; returns the model and its ``meta`` mapping."""
    r = _binio.Reader(Path(path).read_bytes())
    blob = _binio.read_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    model = model_from_config_blob(blob)
    table = {}
    for _ in range(r.unpack("I")):
        name, shape = _binio.read_tensor_meta(r)
        table[name] = _binio.read_f64(r, shape)
    r.expect_end()
    return fill_tensors(model, table), dict(blob.get("meta", {}))


def config_json(model: PNeRVModel) -> str:
    return json.dumps(model.cfg.to_dict(), sort_keys=True)
