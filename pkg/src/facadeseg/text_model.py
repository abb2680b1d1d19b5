"""Character-level tokenizer and a tiny causal transformer language model
with LoRA adapters on the attention projections.

The vocabulary is the 95 printable ASCII characters plus newline, preceded
by five reserved tokens.  The image placeholder's literal spelling is
``<Image>`` so rendered prompts embed it verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import (
    IdOutOfRange,
    MissingImgPlaceholder,
    MultipleImgPlaceholders,
    SequenceTooLong,
    ShapeMismatch,
    TargetNotFound,
    UnsupportedCharacter,
)

PAD_ID, BOS_ID, EOS_ID, IMG_ID, SEG_ID = 0, 1, 2, 3, 4

SPECIAL_SPELLINGS = {
    "<PAD>": PAD_ID,
    "<BOS>": BOS_ID,
    "<EOS>": EOS_ID,
    "<Image>": IMG_ID,
    "<SEG>": SEG_ID,
}

_CHARS = [chr(c) for c in range(0x20, 0x7F)] + ["\n"]
_CHAR_TO_ID = {ch: i + 5 for i, ch in enumerate(_CHARS)}
_ID_TO_STRING = {i: s for s, i in SPECIAL_SPELLINGS.items()}
_ID_TO_STRING.update({i: ch for ch, i in _CHAR_TO_ID.items()})

VOCAB_SIZE = 5 + len(_CHARS)  # 101


@dataclass
class TokenSequence:
    ids: list
    supervise: list = None
    seg_position: Optional[int] = None

    def __post_init__(self):
        if self.supervise is None:
            self.supervise = [False] * len(self.ids)
        if len(self.supervise) != len(self.ids):
            raise ShapeMismatch("supervise flags must match ids length")

    def __len__(self):
        return len(self.ids)


def tokenize(text):
    """Map a string to token ids; special spellings collapse to single ids."""
    ids = []
    i = 0
    while i < len(text):
        matched = False
        if text[i] == "<":
            for spelling, tid in SPECIAL_SPELLINGS.items():
                if text.startswith(spelling, i):
                    ids.append(tid)
                    i += len(spelling)
                    matched = True
                    break
        if matched:
            continue
        ch = text[i]
        if ch not in _CHAR_TO_ID:
            raise UnsupportedCharacter(f"character {ch!r} at offset {i}")
        ids.append(_CHAR_TO_ID[ch])
        i += 1
    seg = ids.index(SEG_ID) if SEG_ID in ids else None
    return TokenSequence(ids=ids, seg_position=seg)


def detokenize(ids):
    out = []
    for i, tid in enumerate(ids):
        tid = int(tid)
        if tid not in _ID_TO_STRING:
            raise IdOutOfRange(f"token id {tid} at position {i}")
        out.append(_ID_TO_STRING[tid])
    return "".join(out)


@dataclass
class LmConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 256
    vocab_size: int = VOCAB_SIZE
    d_ff: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.d_model, self.n_heads, self.max_seq_len,
               self.vocab_size, self.d_ff) <= 0:
            raise ValueError("all LmConfig fields must be positive")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    # attention projection matrices adapted in every layer
    target_mats: tuple = ("wq", "wk", "wv", "wo")

    @property
    def scaling(self):
        return self.alpha / self.rank


def init_lm_params(registry, cfg, rng):
    """Register the base LM.  Only the embedding table and output head are
    trainable; everything else adapts through LoRA (or stays frozen)."""
    registry.add("lm.embed",
                 Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d_model))),
                 trainable=True)
    registry.add("lm.pos",
                 Tensor(rng.normal(0.0, 0.02, (cfg.max_seq_len, cfg.d_model))),
                 trainable=False)
    for i in range(cfg.n_layers):
        layers.init_block(registry, f"lm.layer{i}", cfg.d_model, cfg.d_ff,
                          rng, trainable=False)
    layers.init_layer_norm(registry, "lm.final_ln", cfg.d_model,
                           trainable=False)
    registry.add("lm.head",
                 Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model),
                                   (cfg.d_model, cfg.vocab_size))),
                 trainable=True)


def lora_param_names(cfg, lora):
    names = []
    for i in range(cfg.n_layers):
        for mat in lora.target_mats:
            base = f"lm.layer{i}.attn.{mat}"
            names.append((base, f"lora.{base}.A", f"lora.{base}.B"))
    return names


def init_lora_params(registry, cfg, lora, rng):
    """A is small-random (r x d_in), B is zero (d_out x r) so the adapter
    starts as the identity delta."""
    for base, a_name, b_name in lora_param_names(cfg, lora):
        d_in, d_out = registry[base].shape
        registry.add(a_name, Tensor(rng.normal(0.0, 0.02, (lora.rank, d_in))),
                     trainable=True)
        registry.add(b_name, Tensor(np.zeros((d_out, lora.rank))),
                     trainable=True)


def _lora_weight_fn(registry, lora):
    if lora is None:
        return None

    def weight_fn(name, w):
        a_name, b_name = f"lora.{name}.A", f"lora.{name}.B"
        if a_name not in registry:
            return w
        delta = ad.transpose(ad.matmul(registry[b_name], registry[a_name]))
        return ad.add(w, ad.scale(delta, lora.scaling))

    return weight_fn


def lora_merge(registry, cfg, lora):
    """Fold every adapter into its base weight and drop it from the registry."""
    for base, a_name, b_name in lora_param_names(cfg, lora):
        if a_name not in registry or b_name not in registry:
            raise TargetNotFound(f"adapter parameters for '{base}' not found")
        if base not in registry:
            raise TargetNotFound(f"adapter target '{base}' not found")
        A, B = registry[a_name].data, registry[b_name].data
        w = registry[base]
        if (B @ A).T.shape != w.data.shape:
            raise ShapeMismatch(f"adapter shapes for '{base}'")
        w.data = w.data + lora.scaling * (B @ A).T
        registry.remove(a_name)
        registry.remove(b_name)


def splice_offset(tokens, n_image_tokens):
    """Index shift for token positions after the <Image> placeholder."""
    return n_image_tokens - 1 if n_image_tokens else 0


def spliced_index(tokens, i, n_image_tokens):
    """Map a token-sequence index into the spliced-sequence index."""
    if n_image_tokens == 0:
        return i
    img_pos = tokens.ids.index(IMG_ID)
    return i if i < img_pos else i + n_image_tokens - 1


def lm_forward(registry, cfg, tokens, image_tokens=None, lora=None):
    """Run the causal LM over the token sequence with image tokens spliced
    at the <Image> placeholder.  Returns (hidden, logits), both T' x d."""
    ids = tokens.ids
    for tid in ids:
        if not 0 <= tid < cfg.vocab_size:
            raise IdOutOfRange(f"token id {tid}")
    n_img = 0 if image_tokens is None else image_tokens.shape[0]
    if n_img:
        count = ids.count(IMG_ID)
        if count == 0:
            raise MissingImgPlaceholder("image tokens given but no <Image>")
        if count > 1:
            raise MultipleImgPlaceholders(f"{count} <Image> placeholders")
        img_pos = ids.index(IMG_ID)
        spliced_len = len(ids) + n_img - 1
    else:
        spliced_len = len(ids)
    if spliced_len > cfg.max_seq_len:
        raise SequenceTooLong(f"{spliced_len} > max_seq_len {cfg.max_seq_len}")

    embed = registry["lm.embed"]
    if n_img:
        parts = []
        if img_pos > 0:
            parts.append(ad.gather_rows(embed, ids[:img_pos]))
        parts.append(image_tokens)
        if img_pos + 1 < len(ids):
            parts.append(ad.gather_rows(embed, ids[img_pos + 1:]))
        x = ad.concat(parts, axis=0)
    else:
        x = ad.gather_rows(embed, ids)
    x = ad.add(x, ad.slice_(registry["lm.pos"], slice(0, spliced_len)))

    weight_fn = _lora_weight_fn(registry, lora)
    for i in range(cfg.n_layers):
        x = layers.block_forward(registry, f"lm.layer{i}", x, cfg.n_heads,
                                 causal=True, weight_fn=weight_fn)
    hidden = layers.apply_layer_norm(registry, "lm.final_ln", x)
    logits = ad.matmul(hidden, registry["lm.head"])
    return hidden, logits


def greedy_decode(registry, cfg, prompt, image_tokens=None, lora=None,
                  max_new=64):
    """Deterministic argmax decoding; ties break toward the lowest id
    (np.argmax returns the first maximum)."""
    if max_new <= 0:
        raise ValueError("max_new must be positive")
    ids = list(prompt.ids)
    generated = []
    with ad.no_grad():
        for _ in range(max_new):
            seq = TokenSequence(ids=ids)
            _, logits = lm_forward(registry, cfg, seq,
                                   image_tokens=image_tokens, lora=lora)
            nxt = int(np.argmax(logits.data[-1]))
            ids.append(nxt)
            generated.append(nxt)
            if nxt == EOS_ID:
                break
    supervise = [False] * len(prompt.ids) + [True] * len(generated)
    seg = ids.index(SEG_ID) if SEG_ID in ids else None
    return TokenSequence(ids=ids, supervise=supervise, seg_position=seg)
