"""Embedding-as-mask head: the reserved segmentation token's final hidden
state is projected through a small MLP and scored against every feature-grid
cell; the score grid is bilinearly upsampled to image resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from . import layers
from .errors import BadThreshold, NoSegToken, ShapeMismatch
from .text_model import SEG_ID, spliced_index


@dataclass
class SegConfig:
    d_s: int = 32  # projected segmentation-embedding size


def init_seg_params(registry, cfg, d_model, d_v, rng):
    # projection MLP (d_model -> d_model -> d_s) and the per-cell affinity map
    layers.init_linear(registry, "seg.proj.fc1", d_model, d_model, rng,
                       trainable=True)
    layers.init_linear(registry, "seg.proj.fc2", d_model, cfg.d_s, rng,
                       trainable=True)
    registry.add("seg.decode.wf",
                 ad.Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_v),
                                      (cfg.d_s, d_v))), trainable=True)
    registry.add("seg.decode.bf", ad.Tensor(np.zeros(cfg.d_s)),
                 trainable=True)


def extract_seg_embedding(hidden, tokens):
    """Hidden-state row at the first segmentation-token position.

    `hidden` covers the spliced sequence; the offset between token indices
    and hidden rows is recovered from the length difference.
    """
    if tokens.seg_position is None or tokens.ids[tokens.seg_position] != SEG_ID:
        positions = [i for i, t in enumerate(tokens.ids) if t == SEG_ID]
        if not positions:
            raise NoSegToken("sequence contains no segmentation token")
        seg_pos = positions[0]
    else:
        seg_pos = tokens.seg_position
    n_img = hidden.shape[0] - len(tokens.ids) + 1 \
        if hidden.shape[0] != len(tokens.ids) else 0
    row = spliced_index(tokens, seg_pos, n_img)
    return ad.slice_(hidden, row)


def project_seg(registry, raw):
    """Two affine layers with GELU between: d_model -> d_model -> d_s."""
    if raw.data.ndim != 1:
        raise ShapeMismatch(f"expected a vector, got {raw.shape}")
    x = ad.reshape(raw, (1, raw.shape[0]))
    x = layers.linear(registry, "seg.proj.fc1", x)
    x = ad.gelu(x)
    x = layers.linear(registry, "seg.proj.fc2", x)
    return ad.reshape(x, (x.shape[1],))


def decode_mask(registry, q, feature_map, out_h, out_w):
    """Per-cell score <q, W_f f + b_f> / sqrt(d_s), upsampled to the image.

    Returns pre-sigmoid logits of shape (out_h, out_w).
    """
    h, w, d_v = feature_map.shape
    wf = registry["seg.decode.wf"]
    bf = registry["seg.decode.bf"]
    d_s = wf.shape[0]
    if q.shape != (d_s,):
        raise ShapeMismatch(f"q has shape {q.shape}, expected ({d_s},)")
    if wf.shape[1] != d_v:
        raise ShapeMismatch("feature depth does not match decode head")
    cells = ad.add(ad.matmul(ad.reshape(feature_map, (h * w, d_v)),
                             ad.transpose(wf)), bf)
    scores = ad.matmul(cells, ad.reshape(q, (d_s, 1)))
    grid = ad.scale(ad.reshape(scores, (h, w)), 1.0 / np.sqrt(d_s))
    return ad.bilinear_upsample_2d(grid, out_h, out_w)


def binarize(logits, tau=0.5):
    """Threshold sigmoid(logit) >= tau into a {0,1} mask."""
    if not 0.0 < tau < 1.0:
        raise BadThreshold(f"tau={tau} outside (0,1)")
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return (special.expit(data) >= tau).astype(np.uint8)
