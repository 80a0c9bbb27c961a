"""Video neural representation with Kronecker shortcuts and gated fusion, on a numpy autodiff tape."""

from .autodiff import Tape, Var, backward, grad_check
from .bsm import BSMParams, bsm_forward
from .codec import compress, decompress, rate_distortion
from .errors import ConfigError, FormatError, PNeRVError
from .kfc import KFcParams, budget_table, kfc_forward
from .metrics import ms_ssim, psnr, quality_report, ssim
from .model import (EmbeddingSet, PNeRVConfig, PNeRVModel, build_model, decode_frame, embed_all,
                    load_checkpoint, save_checkpoint)
from .trainer import TrainConfig, reconstruct, train
from .uat import BoundQuery, dual_modulus, dynamics_profile, param_bound
from .video import VideoClip, load_video, save_video

__version__ = "0.1.0"


def __getattr__(name):
    # sklearn is slow to import; only pay for it when the estimator is used
    if name in ("PNeRVEstimator", "check_clip"):
        from . import estimator

        return getattr(estimator, name)
    raise AttributeError(f"module 'pnerv' has no attribute {name!r}")
