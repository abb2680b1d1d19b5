"""Training loop, evaluation runner, single-image segmentation, checkpoint
serialization, and the line-oriented config format."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import facade_data, model, objective, seg_head, text_model
from .errors import (
    BadConfig,
    BadMagic,
    EmptySplit,
    MissingFile,
    NoSegToken,
    TruncatedFile,
    VersionMismatch,
)
from .model import ModelBundle, build_bundle
from .objective import LossWeights
from .optim import AdamState, ParamRegistry, adam_step
from .seg_head import SegConfig
from .text_model import (
    EOS_ID,
    SEG_ID,
    LmConfig,
    LoraConfig,
    TokenSequence,
    detokenize,
    greedy_decode,
    tokenize,
)
from .vision import VisionConfig

CHECKPOINT_MAGIC = b"SAAF1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    max_steps: int = 2000
    per_device_batch: int = 2
    grad_accum: int = 10
    theta_text: float = 0.8
    theta_mask: float = 0.8
    theta_bce: float = 2.0
    theta_dice: float = 0.5
    dice_eps: float = 1.0
    lora_rank: int = 4
    lora_alpha: float = 8.0
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 256
    d_ff: int = 128
    image_size: int = 64
    patch_size: int = 8
    d_v: int = 64
    d_s: int = 32
    seed: int = 0
    freeze_seed: int = 1234
    log_every: int = 50
    tau: float = 0.5

    def validate(self):
        if self.lr <= 0 or self.max_steps <= 0 or self.per_device_batch <= 0 \
                or self.grad_accum <= 0 or self.log_every <= 0:
            raise BadConfig("lr, steps, batch, accumulation must be positive")
        if min(self.theta_text, self.theta_mask, self.theta_bce,
               self.theta_dice) < 0:
            raise BadConfig("loss weights must be nonnegative")
        if not 0 < self.tau < 1:
            raise BadConfig("tau must lie in (0,1)")
        return self

    @property
    def weights(self):
        return LossWeights(text=self.theta_text, mask=self.theta_mask,
                           bce=self.theta_bce, dice=self.theta_dice)

    def model_configs(self):
        lm = LmConfig(n_layers=self.n_layers, d_model=self.d_model,
                      n_heads=self.n_heads, max_seq_len=self.max_seq_len,
                      d_ff=self.d_ff)
        vis = VisionConfig(image_size=self.image_size,
                           patch_size=self.patch_size, d_v=self.d_v)
        seg = SegConfig(d_s=self.d_s)
        lora = LoraConfig(rank=self.lora_rank, alpha=self.lora_alpha)
        return lm, vis, seg, lora


def toy_overfit_config(**overrides):
    """Desk-scale preset for memorizing a handful of samples.

    The finer patch grid (16x16 cells) is what makes >=0.9 mIoU reachable:
    at the default 8x8 grid the bilinear decoder tops out near 0.89 on
    jittered multi-window facades.
    """
    cfg = TrainConfig(lr=1e-3, grad_accum=1, max_steps=1500, log_every=100,
                      patch_size=4, max_seq_len=384)
    return dataclasses.replace(cfg, **overrides).validate()


def desk_generalization_config(**overrides):
    """Desk-scale preset for the few-hundred-sample generalization run."""
    cfg = TrainConfig(lr=1e-3, grad_accum=1, max_steps=3000, log_every=200)
    return dataclasses.replace(cfg, **overrides).validate()


def parse_config(path):
    """Line-oriented `key = value` config with '#' comments.  Unknown keys
    are errors."""
    if not os.path.exists(path):
        raise MissingFile(path)
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadConfig(f"line {lineno}: expected 'key = value'")
            key, _, value = (p.strip() for p in line.partition("="))
            if key not in fields:
                raise BadConfig(f"line {lineno}: unknown key '{key}'")
            caster = float if fields[key] in ("float", float) else int
            try:
                values[key] = caster(value)
            except ValueError:
                raise BadConfig(f"line {lineno}: bad value for '{key}'")
    return TrainConfig(**values).validate()


# --- sample preparation ----------------------------------------------------

def build_training_tokens(prompt, answer):
    """Tokenize prompt+answer+<EOS>; answer tokens and <EOS> are supervised."""
    prompt_len = len(tokenize(prompt).ids)
    full = tokenize(prompt + answer)
    ids = full.ids + [EOS_ID]
    supervise = [False] * prompt_len + [True] * (len(ids) - prompt_len)
    seg = ids.index(SEG_ID) if SEG_ID in ids else None
    return TokenSequence(ids=ids, supervise=supervise, seg_position=seg)


class _PreparedSample:
    """Tokenized sample with cached (frozen-encoder) features."""

    def __init__(self, bundle, root, sample):
        from . import vision
        self.sample = sample
        image, mask = facade_data.load_sample_arrays(root, sample)
        self.image = image
        self.mask = mask.astype(np.float64)
        self.tokens = build_training_tokens(sample.prompt, sample.answer)
        self.feats = vision.encode(bundle.registry, bundle.vision_cfg, image)


def _sample_losses(bundle, prep, weights, dice_eps):
    from . import vision
    image_tokens = vision.project_to_lm(bundle.registry, prep.feats)
    hidden, logits = text_model.lm_forward(
        bundle.registry, bundle.lm_cfg, prep.tokens,
        image_tokens=image_tokens, lora=bundle.lora)
    l_text = objective.text_loss(logits, prep.tokens)
    mask_logits = model.predict_mask_logits(bundle, hidden, prep.tokens,
                                            prep.feats)
    l_mask = objective.mask_loss(mask_logits, prep.mask, weights, dice_eps)
    total = objective.total_loss(l_text, l_mask, weights)
    return l_text, l_mask, total


# --- training --------------------------------------------------------------

def train(config, manifest, root, progress=None):
    """Run the training schedule; returns (bundle, loss_log).

    loss_log is a list of "step,L_t,L_m,L" strings, one per micro-batch,
    in fixed 17-significant-digit decimal.
    """
    config.validate()
    train_samples = manifest.by_split("train")
    if not train_samples:
        raise EmptySplit("manifest has no train samples")
    lm, vis, seg, lora = config.model_configs()
    bundle = build_bundle(lm_cfg=lm, vision_cfg=vis, seg_cfg=seg, lora=lora,
                          init_seed=config.seed,
                          freeze_seed=config.freeze_seed)
    prepared = [_PreparedSample(bundle, root, s) for s in train_samples]
    weights = config.weights
    adam = AdamState(lr=config.lr)
    micro_weight = 1.0 / (config.per_device_batch * config.grad_accum)
    log = []
    for step in range(1, config.max_steps + 1):
        rng = np.random.default_rng([config.seed, step])
        idxs = rng.integers(0, len(prepared), size=config.per_device_batch)
        lt_sum = lm_sum = l_sum = 0.0
        for i in idxs:
            l_text, l_mask, total = _sample_losses(
                bundle, prepared[int(i)], weights, config.dice_eps)
            lt_sum += l_text.item()
            lm_sum += l_mask.item()
            l_sum += total.item()
            ad.backward(ad.scale(total, micro_weight))
        b = config.per_device_batch
        log.append("%d,%.17g,%.17g,%.17g"
                   % (step, lt_sum / b, lm_sum / b, l_sum / b))
        if step % config.grad_accum == 0:
            adam_step(bundle.registry, adam)
            bundle.step += 1
        if progress and step % config.log_every == 0:
            progress(log[-1])
    return bundle, log


# --- evaluation ------------------------------------------------------------

@dataclass
class EvalResult:
    overall: objective.MetricsReport
    by_style: dict
    per_sample: list = field(default_factory=list)


def evaluate(bundle, manifest, root, split="test", tau=0.5,
             teacher_forced=True, force_seg=False, dump_dir=None):
    """Metric pass over one split.

    Teacher-forced mode locates the segmentation token via the ground-truth
    answer; free-decode mode greedy-decodes the answer first.
    """
    samples = manifest.by_split(split)
    if not samples:
        raise EmptySplit(f"split '{split}' is empty")
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
    per_sample = []
    by_style = {}
    for sample in samples:
        pred, _, _ = predict_sample(bundle, root, sample, tau=tau,
                                    teacher_forced=teacher_forced,
                                    force_seg=force_seg)
        image, gt = facade_data.load_sample_arrays(root, sample)
        report = objective.metrics_report(pred, gt)
        per_sample.append((sample.id, sample.style, report))
        by_style.setdefault(sample.style, []).append(report)
        if dump_dir:
            facade_data.write_mask(pred, os.path.join(dump_dir,
                                                      f"{sample.id}.pgm"))
    overall = objective.merge_reports([r for _, _, r in per_sample])
    styles = {k: objective.merge_reports(v) for k, v in sorted(by_style.items())}
    return EvalResult(overall=overall, by_style=styles, per_sample=per_sample)


def predict_sample(bundle, root, sample, tau=0.5, teacher_forced=True,
                   force_seg=False):
    """Predict the binary mask for one manifest sample.

    Returns (mask, answer_text, mask_logits)."""
    image, _ = facade_data.load_sample_arrays(root, sample)
    if teacher_forced:
        tokens = build_training_tokens(sample.prompt, sample.answer)
        answer_text = sample.answer
        with ad.no_grad():
            hidden, _, feats, _ = model.forward_sample(bundle, tokens, image)
            logits = model.predict_mask_logits(bundle, hidden, tokens, feats)
        return seg_head.binarize(logits, tau), answer_text, logits
    answer_text, mask, logits = segment_image(
        bundle, image, sample.description, tau=tau, force_seg=force_seg)
    return mask, answer_text, logits


# --- single-image segmentation ---------------------------------------------

def segment_image(bundle, image, description, tau=0.5, force_seg=False,
                  max_new=48):
    """Free-decoding inference: render the QA prompt, decode the answer,
    and decode the segmentation token's embedding into a mask.

    Returns (answer_text, mask, mask_logits)."""
    from . import vision
    if image.shape[0] != bundle.vision_cfg.image_size or \
            image.shape[1] != bundle.vision_cfg.image_size:
        raise BadConfig(
            f"image dims {image.shape[:2]} do not match the model's "
            f"configured size {bundle.vision_cfg.image_size}")
    prompt = facade_data.render_prompt(description)
    prompt_tokens = tokenize(prompt)
    with ad.no_grad():
        feats = vision.encode(bundle.registry, bundle.vision_cfg, image)
        image_tokens = vision.project_to_lm(bundle.registry, feats)
        decoded = greedy_decode(bundle.registry, bundle.lm_cfg, prompt_tokens,
                                image_tokens=image_tokens, lora=bundle.lora,
                                max_new=max_new)
        answer_ids = decoded.ids[len(prompt_tokens.ids):]
        if answer_ids and answer_ids[-1] == EOS_ID:
            answer_ids = answer_ids[:-1]
        answer_text = detokenize(answer_ids)
        if decoded.seg_position is None:
            if not force_seg:
                raise NoSegToken("decoded answer contains no <SEG> token")
            ids = decoded.ids + [SEG_ID]
            decoded = TokenSequence(ids=ids, seg_position=len(ids) - 1)
        image_tokens = vision.project_to_lm(bundle.registry, feats)
        hidden, _ = text_model.lm_forward(
            bundle.registry, bundle.lm_cfg, decoded,
            image_tokens=image_tokens, lora=bundle.lora)
        logits = model.predict_mask_logits(bundle, hidden, decoded, feats)
    return answer_text, seg_head.binarize(logits, tau), logits


# --- checkpoint serialization ----------------------------------------------

def save_checkpoint(bundle, path, train_seed=0):
    header = {
        "lm_cfg": dataclasses.asdict(bundle.lm_cfg),
        "vision_cfg": dataclasses.asdict(bundle.vision_cfg),
        "seg_cfg": dataclasses.asdict(bundle.seg_cfg),
        "lora": dataclasses.asdict(bundle.lora) if bundle.lora else None,
        "freeze_seed": bundle.freeze_seed,
        "init_seed": bundle.init_seed,
        "train_seed": train_seed,
        "step": bundle.step,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [CHECKPOINT_MAGIC,
           struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<Q", len(blob)), blob,
           struct.pack("<Q", len(bundle.registry))]
    for name, tensor, trainable in bundle.registry.items():
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", int(trainable)))
        out.append(struct.pack("<I", tensor.data.ndim))
        out.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        out.append(tensor.data.astype("<f8").tobytes())
    payload = b"".join(out)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise TruncatedFile("checkpoint ends unexpectedly")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"format version {version}")
    (hlen,) = r.unpack("<Q")
    header = json.loads(r.take(hlen))
    (count,) = r.unpack("<Q")
    registry = ParamRegistry()
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (trainable,) = r.unpack("<B")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        numel = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(numel * 8), dtype="<f8").reshape(shape)
        registry.add(name, ad.Tensor(data.copy()), bool(trainable))
    lora = LoraConfig(**{**header["lora"],
                         "target_mats": tuple(header["lora"]["target_mats"])}) \
        if header["lora"] else None
    bundle = ModelBundle(
        registry=registry,
        lm_cfg=LmConfig(**header["lm_cfg"]),
        vision_cfg=VisionConfig(**header["vision_cfg"]),
        seg_cfg=SegConfig(**header["seg_cfg"]),
        lora=lora,
        freeze_seed=header["freeze_seed"],
        init_seed=header["init_seed"],
        step=header["step"])
    return bundle, header["train_seed"]


def gradient_check(seed=0, tol=1e-4, h=1e-5, config=None, max_coords=16):
    """Finite-difference verification of the full joint loss on one
    synthetic sample.

    Trainable parameters are jittered first so the zero-initialized adapter
    halves do not make their partner gradients vanish trivially.
    """
    from . import vision
    from .optim import finite_diff_check
    config = (config or TrainConfig()).validate()
    lm, vis, seg, lora = config.model_configs()
    bundle = build_bundle(lm_cfg=lm, vision_cfg=vis, seg_cfg=seg, lora=lora,
                          init_seed=seed, freeze_seed=config.freeze_seed)
    rng = np.random.default_rng(seed)
    for _, tensor in bundle.registry.trainable_items():
        tensor.data += rng.normal(0.0, 0.01, tensor.data.shape)

    spec = facade_data.FacadeSpec(rows=2, cols=2, size=config.image_size,
                                  style="photo")
    image, window, _ = facade_data.generate_facade(spec, seed)
    tokens = build_training_tokens(
        facade_data.render_prompt("glazed sections"), facade_data.ANSWER_TEXT)
    feats = vision.encode(bundle.registry, bundle.vision_cfg, image)
    mask = window.astype(np.float64)
    weights = config.weights

    def loss_fn():
        image_tokens = vision.project_to_lm(bundle.registry, feats)
        hidden, logits = text_model.lm_forward(
            bundle.registry, bundle.lm_cfg, tokens,
            image_tokens=image_tokens, lora=bundle.lora)
        l_text = objective.text_loss(logits, tokens)
        mask_logits = model.predict_mask_logits(bundle, hidden, tokens, feats)
        l_mask = objective.mask_loss(mask_logits, mask, weights,
                                     config.dice_eps)
        return objective.total_loss(l_text, l_mask, weights)

    return finite_diff_check(loss_fn, bundle.registry, h=h, tol=tol,
                             seed=seed, max_coords=max_coords)


def write_loss_log(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
