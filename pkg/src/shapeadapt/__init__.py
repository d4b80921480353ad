"""Shape-routed residual adapters for open-vocabulary region classification."""

from .adapters import (
    AdapterBank,
    AllocationWeights,
    BinPartition,
    adapt_all,
    adapt_region,
    adapter_forward,
    allocate,
    load_bank,
    residual_mix,
    save_bank,
    select_adapted,
)
from .classifier import (
    ClassifierConfig,
    ScoredDetection,
    TextEmbeddingBank,
    classification_score,
    classify,
    fuse_scores,
    load_text_bank,
    save_text_bank,
    score_proposal,
)
from .data import (
    Dataset,
    RegionSample,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_train_eval,
    thin_per_cell,
)
from .evaluator import EvalReport, GroundTruth, accuracy_report, ap50, export_adapted_features
from .geometry import BoundingBox, RegionProposal, aspect_ratio, iou
from .roi import FeatureMap, RoiConfig, pool_region_feature, roi_align
from .trainer import TrainConfig, TrainReport, ce_loss, loss_and_gradients, train

__version__ = "0.1.0"

__all__ = [
    "AdapterBank",
    "AllocationWeights",
    "BinPartition",
    "BoundingBox",
    "ClassifierConfig",
    "Dataset",
    "EvalReport",
    "FeatureMap",
    "GroundTruth",
    "RegionProposal",
    "RegionSample",
    "RoiConfig",
    "ScoredDetection",
    "SynthConfig",
    "TextEmbeddingBank",
    "TrainConfig",
    "TrainReport",
    "accuracy_report",
    "adapt_all",
    "adapt_region",
    "adapter_forward",
    "allocate",
    "ap50",
    "aspect_ratio",
    "ce_loss",
    "classification_score",
    "classify",
    "export_adapted_features",
    "fuse_scores",
    "generate_synthetic",
    "iou",
    "load_bank",
    "load_dataset",
    "load_text_bank",
    "loss_and_gradients",
    "pool_region_feature",
    "residual_mix",
    "roi_align",
    "save_bank",
    "save_dataset",
    "save_text_bank",
    "score_proposal",
    "select_adapted",
    "split_train_eval",
    "thin_per_cell",
    "train",
]
