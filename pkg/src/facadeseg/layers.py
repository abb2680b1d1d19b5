"""Transformer building blocks shared by the language model and the vision
encoder.  Parameters live in a ParamRegistry under dotted prefixes; these
functions only read them."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CAUSAL_MASK_VALUE = -1e30


def init_linear(registry, name, d_in, d_out, rng, trainable, bias=True,
                std=None):
    if std is None:
        std = 1.0 / np.sqrt(d_in)
    registry.add(f"{name}.w", Tensor(rng.normal(0.0, std, (d_in, d_out))),
                 trainable)
    if bias:
        registry.add(f"{name}.b", Tensor(np.zeros(d_out)), trainable)


def linear(registry, name, x):
    out = ad.matmul(x, registry[f"{name}.w"])
    if f"{name}.b" in registry:
        out = ad.add(out, registry[f"{name}.b"])
    return out


def init_layer_norm(registry, name, d, trainable):
    registry.add(f"{name}.gain", Tensor(np.ones(d)), trainable)
    registry.add(f"{name}.bias", Tensor(np.zeros(d)), trainable)


def apply_layer_norm(registry, name, x):
    return ad.layer_norm(x, registry[f"{name}.gain"], registry[f"{name}.bias"])


def init_block(registry, prefix, d_model, d_ff, rng, trainable):
    """One pre-norm transformer block: attn + 2-layer GELU MLP."""
    init_layer_norm(registry, f"{prefix}.ln1", d_model, trainable)
    for mat in ("wq", "wk", "wv", "wo"):
        registry.add(f"{prefix}.attn.{mat}",
                     Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model),
                                       (d_model, d_model))),
                     trainable)
    init_layer_norm(registry, f"{prefix}.ln2", d_model, trainable)
    init_linear(registry, f"{prefix}.mlp.fc1", d_model, d_ff, rng, trainable)
    init_linear(registry, f"{prefix}.mlp.fc2", d_ff, d_model, rng, trainable)


def _attention(q, k, v, n_heads, causal):
    T, d_model = q.shape
    dh = d_model // n_heads

    def split(t):
        # T x d -> heads x T x dh
        return ad.transpose(ad.reshape(t, (T, n_heads, dh)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))),
                      1.0 / np.sqrt(dh))
    if causal:
        mask = np.triu(np.full((T, T), CAUSAL_MASK_VALUE), k=1)
        scores = ad.add(scores, Tensor(mask))
    att = ad.softmax(scores)
    out = ad.matmul(att, vh)  # heads x T x dh
    return ad.reshape(ad.transpose(out, (1, 0, 2)), (T, d_model))


def block_forward(registry, prefix, x, n_heads, causal, weight_fn=None):
    """Apply one transformer block.

    `weight_fn(name, tensor)` lets the caller substitute an effective weight
    for a registered one (used for attached LoRA adapters).
    """
    if weight_fn is None:
        weight_fn = lambda name, t: t

    h = apply_layer_norm(registry, f"{prefix}.ln1", x)
    proj = {}
    for mat in ("wq", "wk", "wv", "wo"):
        name = f"{prefix}.attn.{mat}"
        proj[mat] = weight_fn(name, registry[name])
    q = ad.matmul(h, proj["wq"])
    k = ad.matmul(h, proj["wk"])
    v = ad.matmul(h, proj["wv"])
    att = ad.matmul(_attention(q, k, v, n_heads, causal), proj["wo"])
    x = ad.add(x, att)

    h = apply_layer_norm(registry, f"{prefix}.ln2", x)
    h = linear(registry, f"{prefix}.mlp.fc1", h)
    h = ad.gelu(h)
    h = linear(registry, f"{prefix}.mlp.fc2", h)
    return ad.add(x, h)
