"""Gravity-point detection of small lesions: anchor grids, hooking, the
multi-task gravity loss, box-synthesis NMS decoding, and FROC evaluation with
bootstrap comparison."""

from .anchors import (
    GravityPointSet,
    GridConfig,
    HookingAssignment,
    LesionAnnotation,
    compute_feature_grid_size,
    generate_base_configuration,
    generate_gravity_points,
    hook_gravity_points,
    hooking_coverage,
    per_grid_count,
)
from .data import (
    Dataset,
    DatasetManifest,
    ManifestEntry,
    Sample,
    augment_flips,
    load_dataset,
    read_manifest,
    split_twofold,
    tissue_mask_default,
)
from .evaluation import (
    EvalConfig,
    FROCCurve,
    MatchedImage,
    bootstrap_compare,
    froc_curve,
    match_dataset,
    match_detections,
    partial_aufc,
)
from .inference import (
    Detection,
    InferenceConfig,
    apply_tissue_mask,
    classify_detections,
    decode,
    iou,
    nms,
)
from .losses import (
    LossConfig,
    channel_classification_loss,
    classification_loss,
    gravity_loss,
    regression_loss,
    smooth_l1,
)
from .model import ModelConfig, Predictions, build_model, init_heads, predict
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, load_checkpoint, train_model

__version__ = "0.1.0"

__all__ = [
    "GravityPointSet",
    "GridConfig",
    "HookingAssignment",
    "LesionAnnotation",
    "compute_feature_grid_size",
    "generate_base_configuration",
    "generate_gravity_points",
    "hook_gravity_points",
    "hooking_coverage",
    "per_grid_count",
    "Dataset",
    "DatasetManifest",
    "ManifestEntry",
    "Sample",
    "augment_flips",
    "load_dataset",
    "read_manifest",
    "split_twofold",
    "tissue_mask_default",
    "EvalConfig",
    "FROCCurve",
    "MatchedImage",
    "bootstrap_compare",
    "froc_curve",
    "match_dataset",
    "match_detections",
    "partial_aufc",
    "Detection",
    "InferenceConfig",
    "apply_tissue_mask",
    "classify_detections",
    "decode",
    "iou",
    "nms",
    "LossConfig",
    "channel_classification_loss",
    "classification_loss",
    "gravity_loss",
    "regression_loss",
    "smooth_l1",
    "ModelConfig",
    "Predictions",
    "build_model",
    "init_heads",
    "predict",
    "SyntheticSpec",
    "generate_synthetic",
    "TrainConfig",
    "load_checkpoint",
    "train_model",
    "__version__",
]
