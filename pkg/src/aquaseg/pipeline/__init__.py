"""Model assembly, composite loss, training, and evaluation."""

from .anchors import (
    AnchorLayout,
    decode_deltas,
    encode_deltas,
    match_anchors,
    pyramid_anchors,
    sample_anchors,
)
from .config import (
    ConfigError,
    DecoderConfig,
    PipelineConfig,
    RpnConfig,
    TrainConfig,
    config_from_dict,
    load_config,
    save_config,
)
from .heads import ConvHeads, MaskDecoder
from .losses import AlignmentError, LossBreakdown, LossInputs, compute_loss
from .model import (
    SegmentationModel,
    build_loss_inputs,
    build_model,
    scene_ground_truth,
    scene_tensors,
)
from .train import TrainingDivergedError, evaluate, frozen_parameter_hash, train

__all__ = [
    "AlignmentError",
    "AnchorLayout",
    "ConfigError",
    "ConvHeads",
    "DecoderConfig",
    "LossBreakdown",
    "LossInputs",
    "MaskDecoder",
    "PipelineConfig",
    "RpnConfig",
    "SegmentationModel",
    "TrainConfig",
    "TrainingDivergedError",
    "build_loss_inputs",
    "build_model",
    "compute_loss",
    "config_from_dict",
    "decode_deltas",
    "encode_deltas",
    "evaluate",
    "frozen_parameter_hash",
    "load_config",
    "match_anchors",
    "pyramid_anchors",
    "sample_anchors",
    "save_config",
    "scene_ground_truth",
    "scene_tensors",
    "train",
]
