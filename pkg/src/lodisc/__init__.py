"""Global-local self-supervised contrastive learning at desk scale.

A self-contained stack: a numpy-backed tensor library with reverse-mode
autodiff, a small Vision Transformer that exposes its attention weights, a
momentum dual encoder, attention-fused location-wise patch masking, the
combined global + local InfoNCE objective, and linear-probe / retrieval
evaluation harnesses.
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, augment
from .data import Dataset, SyntheticSpec, ingest, synthesize
from .evaluate import FeatureBank, ProbeConfig, extract_features, foreground_focus, linear_probe, retrieve
from .heads import DualEncoder, HeadConfig
from .losses import BranchOutputs, LossConfig, info_nce, symmetric_loss, total_loss
from .masking import (
    FusedImportance,
    PatchMask,
    PixelMask,
    apply_mask,
    baseline_mask,
    expand_mask,
    extract_class_attention,
    fuse_all,
    fuse_attention,
    kept_count,
    select_pivotal,
)
from .optim import AdamW, CosineSchedule, SGD
from .pipeline import StepReport, TrainConfig, Trainer, load_encoder
from .rng import stream
from .tensor import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    no_grad,
)
from .vit import AttentionStack, ViTBackbone, ViTConfig, patchify

__all__ = [
    "AugmentConfig", "augment",
    "Dataset", "SyntheticSpec", "ingest", "synthesize",
    "FeatureBank", "ProbeConfig", "extract_features", "foreground_focus", "linear_probe", "retrieve",
    "DualEncoder", "HeadConfig",
    "BranchOutputs", "LossConfig", "info_nce", "symmetric_loss", "total_loss",
    "FusedImportance", "PatchMask", "PixelMask", "apply_mask", "baseline_mask", "expand_mask",
    "extract_class_attention", "fuse_all", "fuse_attention", "kept_count", "select_pivotal",
    "AdamW", "CosineSchedule", "SGD",
    "StepReport", "TrainConfig", "Trainer", "load_encoder",
    "stream",
    "ConfigError", "ContractError", "DimensionError", "NumericError", "Tensor", "no_grad",
    "AttentionStack", "ViTBackbone", "ViTConfig", "patchify",
]
