"""Overfitting a model to one clip: L2 loss, Adam, cosine learning rate.

Two protocols: ``"regression"`` trains on every frame; ``"interpolation"``
trains on the odd-numbered frames (1-based numbering, i.e. 0-based indices
0, 2, 4, ...) and holds out the even-numbered ones for evaluation.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from . import ops
from .autodiff import Tape, backward
from .metrics import psnr
from .model import PNeRVModel, decode_frame, embed_all, encode

__all__ = ["TrainConfig", "AdamState", "EpochLog", "TrainResult", "l2_loss", "adam_step",
           "cosine_lr", "split_frames", "train", "reconstruct", "log_to_csv"]

log = logging.getLogger(__name__)

MODES = ("regression", "interpolation")


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_max: float = 5e-4
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    loss: str = "L2"
    mode: str = "regression"
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_max >= self.lr_min >= 0:
            raise ValueError(f"need lr_max >= lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss != "L2":
            raise ValueError(f"only the L2 loss is supported, got {self.loss!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def l2_loss(pred, target):
    """Mean squared error; differentiable when ``pred`` is a Var."""
    return ops.mean_squared_error(pred, target)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray | None], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update, in place.

    Parameters whose gradient is missing or ``None`` are left untouched,
    moments included.
    """
    b1, b2 = betas
    state.step += 1
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * w
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def split_frames(n: int, mode: str) -> tuple[list[int], list[int]]:
    """0-based (train, held-out) indices for a protocol."""
    if mode == "regression":
        return list(range(n)), []
    if n < 2:
        raise ValueError("interpolation needs at least two frames")
    return list(range(0, n, 2)), list(range(1, n, 2))


@dataclass
class EpochLog:
    epoch: int
    loss: float
    psnr: float
    lr: float


@dataclass
class TrainResult:
    model: PNeRVModel
    log: list[EpochLog]
    train_frames: list[int]
    eval_frames: list[int]
    cfg: TrainConfig

    @property
    def final_loss(self) -> float:
        return self.log[-1].loss


def log_to_csv(entries: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "psnr", "lr"])
    for e in entries:
        w.writerow([e.epoch, repr(e.loss), repr(e.psnr), repr(e.lr)])
    return buf.getvalue()


def train_step(model: PNeRVModel, frames: np.ndarray, t: int):
    """Forward and backward on frame ``t``; returns (loss, prediction, grads by name)."""
    tape = Tape()
    leaves = {k: tape.var(v, name=k) for k, v in model.params.items()}
    content, temporal = encode(model, frames, t, params=leaves)
    pred = decode_frame(model, content, temporal, params=leaves, training=True, update_stats=True)
    loss = l2_loss(pred, frames[t])
    backward(tape, loss)
    grads = {k: tape.gradients.get(v.id) for k, v in leaves.items()}
    return float(loss.value[0]), pred.value, grads


def train(model: PNeRVModel, frames, cfg: TrainConfig,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Fit ``model`` (in place) to ``frames`` of shape (T, 3, H, W).

    Frames are visited in index order, one per step. The learning rate
    follows a per-step cosine from ``lr_max`` to ``lr_min``. Each epoch logs
    the mean loss and mean PSNR of the steps it took and the lr at its start.
    """
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("empty clip")
    train_idx, eval_idx = split_frames(len(frames), cfg.mode)
    state = AdamState()
    total = cfg.epochs * len(train_idx)
    entries = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr_epoch = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
        losses, scores = [], []
        for t in train_idx:
            loss, pred, grads = train_step(model, frames, t)
            adam_step(model.params, grads, state, cosine_lr(step, total, cfg.lr_max, cfg.lr_min),
                      cfg.betas, cfg.eps, cfg.weight_decay)
            step += 1
            losses.append(loss)
            scores.append(psnr(pred, frames[t]))
        entry = EpochLog(epoch, float(np.mean(losses)), float(np.mean(scores)), lr_epoch)
        entries.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("epoch %d loss %.6g psnr %.2f lr %.3g", epoch, entry.loss, entry.psnr, entry.lr)
    return TrainResult(model, entries, train_idx, eval_idx, cfg)


def reconstruct(model: PNeRVModel, frames=None, indices=None) -> np.ndarray:
    """Decode the given frames (all by default) in eval mode.

    Embeddings come from the model's stored set if it has one, otherwise
    from running the encoder on ``frames``.
    """
    if frames is not None:
        frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    emb = embed_all(model, frames)
    idx = range(emb.T) if indices is None else indices
    return np.stack([decode_frame(model, *emb.frame(t)) for t in idx])
