"""Adaptive sparse anchor generation on feature pyramids.

A patch-based anchor generator: a fixed stage predicts anchors from P5
quadrants and a pooled P6 patch, then an adaptive probing loop descends
to finer levels around uncertain small anchors. Includes per-patch
one-to-one matching losses with score/IoU-derived weights, a deterministic
training loop, a synthetic-scene harness, and evaluation metrics.
"""

from .generator import GenConfig, GenResult, GenTrace, export_proposals, generate
from .geometry import Box, DegenerateBoxError, giou, giou_loss_and_grad, iou, nms
from .losses import LossBreakdown, WeightConfig, anchor_loss, neg_weight, norm_weight, pos_weight
from .matching import Assignment, GroundTruth, hungarian, match_cost
from .metrics import (
    RecallReport,
    ablation_sweep,
    average_recall,
    count_correlation,
    flop_count,
    level_histogram,
    spearman,
)
from .predictor import (
    PredictorBank,
    PredictorParams,
    ScoredAnchor,
    init_bank,
    load_params,
    predict,
    predict_backward,
    save_params,
)
from .pyramid import FeatureMap, FeaturePyramid, Patch, roi_align
from .rng import SplitMix, derive_seed
from .synthetic import Scene, SceneSpec, SynthConfig, make_dataset, read_dataset, write_dataset
from .training import AdamW, NumericError, TrainConfig, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Assignment",
    "Box",
    "DegenerateBoxError",
    "FeatureMap",
    "FeaturePyramid",
    "GenConfig",
    "GenResult",
    "GenTrace",
    "GroundTruth",
    "LossBreakdown",
    "NumericError",
    "Patch",
    "PredictorBank",
    "PredictorParams",
    "RecallReport",
    "Scene",
    "SceneSpec",
    "ScoredAnchor",
    "SplitMix",
    "SynthConfig",
    "TrainConfig",
    "WeightConfig",
    "ablation_sweep",
    "anchor_loss",
    "average_recall",
    "count_correlation",
    "derive_seed",
    "export_proposals",
    "flop_count",
    "generate",
    "giou",
    "giou_loss_and_grad",
    "hungarian",
    "init_bank",
    "iou",
    "level_histogram",
    "load_params",
    "make_dataset",
    "match_cost",
    "neg_weight",
    "nms",
    "norm_weight",
    "pos_weight",
    "predict",
    "predict_backward",
    "read_dataset",
    "roi_align",
    "save_params",
    "spearman",
    "train",
    "train_step",
    "write_dataset",
]
