"""Dual-network weakly supervised segmentation: regional contrastive and
multi-scale attentive self-supervision over class activation maps."""

from .data import ImageSample, generate_dataset
from .estimator import WeaklySupervisedSegmenter
from .mam import MamConfig
from .metrics import SegMetrics, evaluate, threshold_sweep
from .model import CamBackbone
from .rcm import PrototypeBank, RcmConfig
from .train import EMAPair, TrainConfig, Trainer

__all__ = [
    "CamBackbone",
    "EMAPair",
    "ImageSample",
    "MamConfig",
    "PrototypeBank",
    "RcmConfig",
    "SegMetrics",
    "TrainConfig",
    "Trainer",
    "WeaklySupervisedSegmenter",
    "evaluate",
    "generate_dataset",
    "threshold_sweep",
]
