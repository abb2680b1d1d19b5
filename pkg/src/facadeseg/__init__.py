"""Language-guided wall/window segmentation of synthetic building facades.

A tiny multimodal language model emits a reserved segmentation token whose
final-layer embedding is decoded into a binary mask, trained end-to-end with
a joint text + mask objective on a procedurally generated facade corpus.
"""

from .autodiff import Tensor, apply_primitive, backward, no_grad
from .model import ModelBundle, build_bundle, merge_lora
from .objective import LossWeights, MetricsReport
from .optim import AdamState, ParamRegistry, adam_step, finite_diff_check
from .pipeline import (
    TrainConfig,
    evaluate,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    segment_image,
    train,
)

__all__ = [
    "AdamState",
    "LossWeights",
    "MetricsReport",
    "ModelBundle",
    "ParamRegistry",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "apply_primitive",
    "backward",
    "build_bundle",
    "evaluate",
    "finite_diff_check",
    "gradient_check",
    "load_checkpoint",
    "merge_lora",
    "no_grad",
    "save_checkpoint",
    "segment_image",
    "train",
]

__version__ = "0.1.0"
