"""scikit-learn style wrapper: ``fit`` overfits one clip, ``transform`` gives its codes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import psnr
from .model import EmbeddingSet, PNeRVConfig, build_model, decode_frame, embed_all
from .trainer import TrainConfig, split_frames, train

__all__ = ["PNeRVEstimator", "check_clip"]


def check_clip(X, *, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a clip as a finite float64 array of shape (T, 3, H, W) with values in [0, 1]."""
    frames = np.asarray(getattr(X, "frames", X), dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected a clip of shape (T, 3, H, W), got {frames.shape}")
    if len(frames) == 0:
        raise ValueError("clip has no frames")
    if not np.all(np.isfinite(frames)):
        raise ValueError("clip contains non-finite values")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("clip values must lie in [0, 1]")
    if shape is not None and frames.shape[2:] != tuple(shape):
        raise ValueError(f"clip frames are {frames.shape[2:]}, model decodes {tuple(shape)}")
    return frames


class PNeRVEstimator(TransformerMixin, BaseEstimator):
    """Fit a decoder to a single clip.

    ``transform`` returns one flattened content embedding per frame (content
    and temporal parts concatenated when shortcuts are on), and
    ``inverse_transform`` decodes such rows back to frames.
    """

    def __init__(self, variant="L", fusion_kind="BSM", upscaler_kind="KFc",
                 embed_content_shape=(16, 2, 4), embed_temporal_shape=(2, 8, 16),
                 mainstream_strides=(2, 2, 2, 2, 1, 1), channel_widths=(8, 8, 8, 8, 8, 8),
                 encoder_width=16, epochs=100, lr=5e-3, mode="regression", random_state=0):
        self.variant = variant
        self.fusion_kind = fusion_kind
        self.upscaler_kind = upscaler_kind
        self.embed_content_shape = embed_content_shape
        self.embed_temporal_shape = embed_temporal_shape
        self.mainstream_strides = mainstream_strides
        self.channel_widths = channel_widths
        self.encoder_width = encoder_width
        self.epochs = epochs
        self.lr = lr
        self.mode = mode
        self.random_state = random_state

    def _model_config(self) -> PNeRVConfig:
        return PNeRVConfig(
            variant=self.variant, fusion_kind=self.fusion_kind, upscaler_kind=self.upscaler_kind,
            embed_content_shape=tuple(self.embed_content_shape),
            embed_temporal_shape=tuple(self.embed_temporal_shape),
            mainstream_strides=tuple(self.mainstream_strides), channel_widths=tuple(self.channel_widths),
            encoder_width=self.encoder_width, seed=int(self.random_state),
        )

    def fit(self, X, y=None):
        cfg = self._model_config()
        frames = check_clip(X, shape=cfg.output_hw)
        result = train(build_model(cfg), frames,
                       TrainConfig(epochs=self.epochs, lr_max=self.lr, mode=self.mode, seed=int(self.random_state)))
        self.model_ = result.model
        self.history_ = result.log
        self.train_frames_ = result.train_frames
        self.eval_frames_ = result.eval_frames
        self.n_frames_ = len(frames)
        return self

    def _split(self) -> int:
        return int(np.prod(self.model_.cfg.embed_content_shape))

    def transform(self, X):
        check_is_fitted(self, "model_")
        emb = embed_all(self.model_, check_clip(X, shape=self.model_.cfg.output_hw))
        rows = emb.content.reshape(emb.T, -1)
        if emb.temporal is not None:
            rows = np.concatenate([rows, emb.temporal.reshape(emb.T, -1)], axis=1)
        return rows

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        n = self._split()
        content = Z[:, :n].reshape(len(Z), *cfg.embed_content_shape)
        temporal = None
        if cfg.has_shortcuts:
            temporal = Z[:, n:].reshape(len(Z), *cfg.embed_temporal_shape)
        elif Z.shape[1] != n:
            raise ValueError(f"expected {n} columns, got {Z.shape[1]}")
        emb = EmbeddingSet(content, temporal)
        return np.stack([decode_frame(self.model_, *emb.frame(t)) for t in range(emb.T)])

    def predict(self, X):
        """Reconstruct every frame of ``X``."""
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Mean PSNR, over the held-out frames when fitted in interpolation mode."""
        frames = check_clip(X, shape=getattr(self, "model_", None) and self.model_.cfg.output_hw)
        pred = self.predict(frames)
        _, held_out = split_frames(len(frames), self.mode)
        idx = held_out or range(len(frames))
        return float(np.mean([psnr(pred[t], frames[t]) for t in idx]))
