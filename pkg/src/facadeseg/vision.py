"""Patch-based vision encoder (frozen) plus the trainable vision-to-language
projector.

The encoder is randomly initialized from a dedicated freeze seed and never
updated; it plays the role of a fixed feature extractor.  Only the projector
that maps grid cells into language-model token vectors is trainable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import NonDivisibleDims, ShapeMismatch


@dataclass
class VisionConfig:
    image_size: int = 64
    patch_size: int = 8
    d_v: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 128

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_tokens(self):
        return self.grid * self.grid


def patchify(image, patch_size):
    """Rearrange an HxWx3 image into an (h*w) x (p*p*3) matrix, row-major
    over the patch grid.  Lossless."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"expected HxWx3 image, got {image.shape}")
    H, W, _ = image.shape
    p = int(patch_size)
    if H % p or W % p:
        raise NonDivisibleDims(f"image {H}x{W} not divisible by patch {p}")
    h, w = H // p, W // p
    patches = image.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(h * w, p * p * 3)


def unpatchify(patches, H, W, patch_size):
    p = int(patch_size)
    h, w = H // p, W // p
    return (np.asarray(patches).reshape(h, w, p, p, 3)
            .transpose(0, 2, 1, 3, 4).reshape(H, W, 3))


def init_vision_params(registry, cfg, freeze_rng, train_rng, d_model):
    """Frozen encoder weights come from `freeze_rng`; the trainable
    projector from `train_rng`."""
    p = cfg.patch_size
    layers.init_linear(registry, "vision.patch_embed", p * p * 3, cfg.d_v,
                       freeze_rng, trainable=False)
    registry.add("vision.pos",
                 Tensor(freeze_rng.normal(0.0, 0.02, (cfg.n_tokens, cfg.d_v))),
                 trainable=False)
    for i in range(cfg.n_blocks):
        layers.init_block(registry, f"vision.block{i}", cfg.d_v, cfg.d_ff,
                          freeze_rng, trainable=False)
    layers.init_layer_norm(registry, "vision.final_ln", cfg.d_v,
                           trainable=False)
    layers.init_linear(registry, "vision.proj", cfg.d_v, d_model, train_rng,
                       trainable=True)


def encode(registry, cfg, image):
    """Image -> h x w x d_v feature grid.  Pure function of the frozen
    parameters and the image; records no graph."""
    patches = patchify(image, cfg.patch_size)
    with ad.no_grad():
        x = layers.linear(registry, "vision.patch_embed", Tensor(patches))
        x = ad.add(x, registry["vision.pos"])
        for i in range(cfg.n_blocks):
            x = layers.block_forward(registry, f"vision.block{i}", x,
                                     cfg.n_heads, causal=False)
        x = layers.apply_layer_norm(registry, "vision.final_ln", x)
    g = cfg.grid
    return Tensor(x.data.reshape(g, g, cfg.d_v))


def project_to_lm(registry, feature_map):
    """Per-cell affine map d_v -> d_model, cells in row-major order."""
    h, w, d_v = feature_map.shape
    flat = ad.reshape(feature_map, (h * w, d_v))
    if registry["vision.proj.w"].shape[0] != d_v:
        raise ShapeMismatch("feature depth does not match projector input")
    return layers.linear(registry, "vision.proj", flat)


def encoder_param_names(registry):
    return [n for n in registry.names()
            if n.startswith("vision.") and not n.startswith("vision.proj")]


def encoder_hash(registry):
    """SHA-256 over the frozen encoder parameters in name order."""
    digest = hashlib.sha256()
    for name in encoder_param_names(registry):
        digest.update(name.encode())
        digest.update(registry[name].data.tobytes())
    return digest.hexdigest()
