"""ModelBundle: every named parameter of the system plus its configs.

Trainable set: LoRA adapters, token embedding, output head, vision-to-LM
projector, the segmentation projection MLP, and the decode head.  The vision
encoder is initialized from its own freeze seed and stays frozen for good.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seg_head, text_model, vision
from .optim import ParamRegistry
from .seg_head import SegConfig
from .text_model import LmConfig, LoraConfig
from .vision import VisionConfig


@dataclass
class ModelBundle:
    registry: ParamRegistry
    lm_cfg: LmConfig
    vision_cfg: VisionConfig
    seg_cfg: SegConfig
    lora: LoraConfig = None  # None once adapters are merged
    freeze_seed: int = 0
    init_seed: int = 0
    step: int = 0

    def trainable_names(self):
        return [n for n, _ in self.registry.trainable_items()]

    def encoder_hash(self):
        return vision.encoder_hash(self.registry)


def build_bundle(lm_cfg=None, vision_cfg=None, seg_cfg=None, lora=None,
                 init_seed=0, freeze_seed=1234):
    lm_cfg = lm_cfg or LmConfig()
    vision_cfg = vision_cfg or VisionConfig()
    seg_cfg = seg_cfg or SegConfig()
    lora = lora if lora is not None else LoraConfig()

    registry = ParamRegistry()
    train_rng = np.random.default_rng(init_seed)
    freeze_rng = np.random.default_rng(freeze_seed)
    text_model.init_lm_params(registry, lm_cfg, train_rng)
    text_model.init_lora_params(registry, lm_cfg, lora, train_rng)
    vision.init_vision_params(registry, vision_cfg, freeze_rng, train_rng,
                              lm_cfg.d_model)
    seg_head.init_seg_params(registry, seg_cfg, lm_cfg.d_model,
                             vision_cfg.d_v, train_rng)
    return ModelBundle(registry=registry, lm_cfg=lm_cfg,
                       vision_cfg=vision_cfg, seg_cfg=seg_cfg, lora=lora,
                       freeze_seed=freeze_seed, init_seed=init_seed)


def merge_lora(bundle):
    """Fold adapters into the base weights; forward outputs are preserved."""
    if bundle.lora is None:
        return bundle
    text_model.lora_merge(bundle.registry, bundle.lm_cfg, bundle.lora)
    bundle.lora = None
    return bundle


def forward_sample(bundle, tokens, image):
    """Teacher-forced pass: image -> features -> spliced LM forward.

    Returns (hidden, logits, feature_map, image_tokens).
    """
    feats = vision.encode(bundle.registry, bundle.vision_cfg, image)
    image_tokens = vision.project_to_lm(bundle.registry, feats)
    hidden, logits = text_model.lm_forward(
        bundle.registry, bundle.lm_cfg, tokens,
        image_tokens=image_tokens, lora=bundle.lora)
    return hidden, logits, feats, image_tokens


def predict_mask_logits(bundle, hidden, tokens, feats):
    raw = seg_head.extract_seg_embedding(hidden, tokens)
    q = seg_head.project_seg(bundle.registry, raw)
    size = bundle.vision_cfg.image_size
    return seg_head.decode_mask(bundle.registry, q, feats, size, size)
