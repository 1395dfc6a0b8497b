"""Hierarchical co-occurrence network for skeleton-based action recognition
and temporal action detection, built on a self-contained numpy autodiff
engine."""

from .data import (
    DetectionSequence,
    SkeletonSequence,
    compute_motion,
    load_jsonl,
    save_jsonl,
    split_dataset,
    synth_generate,
    synth_generate_detection,
)
from .detection import (
    RegressionTarget,
    AnchorSet,
    DetectionConfig,
    DetectionHead,
    TemporalWindow,
    detect,
    evaluate_map,
    generate_anchors,
    nms_temporal,
    temporal_iou,
    train_detector,
)
from .estimators import HcnClassifier, HcnDetector
from .losses import DetectionLossBatch, detection_loss, smooth_l1, softmax, softmax_cross_entropy
from .model import FeatureMaps, HcnModel, ModelConfig, ntu_config, sbu_config, tiny_config
from .optim import TrainState, adam_step
from .tensor import GradTape, ParameterStore, Tensor
from .training import TrainSchedule, evaluate, predict_sequence, train_loop

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "DetectionConfig",
    "DetectionHead",
    "DetectionLossBatch",
    "DetectionSequence",
    "FeatureMaps",
    "GradTape",
    "HcnClassifier",
    "HcnDetector",
    "HcnModel",
    "ModelConfig",
    "ParameterStore",
    "SkeletonSequence",
    "TemporalWindow",
    "Tensor",
    "TrainSchedule",
    "TrainState",
    "adam_step",
    "compute_motion",
    "detect",
    "detection_loss",
    "evaluate",
    "evaluate_map",
    "generate_anchors",
    "load_jsonl",
    "nms_temporal",
    "ntu_config",
    "predict_sequence",
    "save_jsonl",
    "sbu_config",
    "smooth_l1",
    "softmax",
    "softmax_cross_entropy",
    "split_dataset",
    "synth_generate",
    "synth_generate_detection",
    "temporal_iou",
    "tiny_config",
    "train_detector",
    "train_loop",
    "__version__",
]
