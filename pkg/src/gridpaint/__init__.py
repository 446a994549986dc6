"""gridpaint: masked cross-modal transformer that paints synthetic grids."""

import ctypes as _ctypes
import os as _os

if not _os.environ.get("GRIDPAINT_NO_MALLOC_TUNE"):
    # glibc returns ~1MB tape buffers to the kernel after every step and
    # faults them back in on the next; raising the mmap/trim thresholds
    # roughly halves training step time. M_TRIM_THRESHOLD=-1, M_MMAP_THRESHOLD=-3.
    try:
        _libc = _ctypes.CDLL("libc.so.6")
        _libc.mallopt(-3, 1 << 30)
        _libc.mallopt(-1, 1 << 30)
    except OSError:
        pass

from .tensor import Tape, Tensor, backward
from .scenes import Scene, FeatureGrid, caption_for, generate_scene, oracle_check
from .vocab import Codebook, kmeans_fit, quantize, reconstruct
from .model import CrossModalModel, ModelConfig
from .pretrain import TrainConfig, pretrain_loop
from .samplers import SamplerSchedule, mask_predict_schedule
from .metrics import fid, inception_score
from .experiment import ExperimentConfig

__all__ = [
    "Tape", "Tensor", "backward",
    "Scene", "FeatureGrid", "caption_for", "generate_scene", "oracle_check",
    "Codebook", "kmeans_fit", "quantize", "reconstruct",
    "CrossModalModel", "ModelConfig",
    "TrainConfig", "pretrain_loop",
    "SamplerSchedule", "mask_predict_schedule",
    "fid", "inception_score",
    "ExperimentConfig",
]

__version__ = "0.1.0"
