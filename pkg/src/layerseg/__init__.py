"""Coated-particle layer segmentation with pixel-wise uncertainty from a meta-model."""
from .core_types import NUM_CLASSES, TAXONOMY, ImageSample, ShapeError, ValidationError
from .losses import WfmseParams, dice_loss, soft_label_targets, wfmse_loss
from .metanet import MetaModelConfig, MetaNet, build_metanet
from .metrics import seg_report, uq_report
from .segnet import SegModelConfig, SegNet, build_segnet
from .trainer import StageConfig, run_pipeline, train_meta, train_segmentation

__version__ = "0.1.0"

__all__ = [
    "NUM_CLASSES", "TAXONOMY", "ImageSample", "ShapeError", "ValidationError",
    "WfmseParams", "dice_loss", "soft_label_targets", "wfmse_loss",
    "MetaModelConfig", "MetaNet", "build_metanet", "seg_report", "uq_report",
    "SegModelConfig", "SegNet", "build_segnet",
    "StageConfig", "run_pipeline", "train_meta", "train_segmentation",
]
