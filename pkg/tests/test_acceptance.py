"""Acceptance gate: nine property-based criteria covering gradients, loss
and metric oracles, overfit and generalization runs, the frozen-parameter
regime, adapter-merge equivalence, determinism/persistence, and format
fidelity.

The heavy fixtures (a 16-train-sample overfit run and a few-hundred-sample
generalization run) are shared across criteria, so this module takes a few
minutes of CPU.
"""

import hashlib
import time

import numpy as np
import pytest

import facadeseg.autodiff as ad
from facadeseg import facade_data, objective, pipeline
from facadeseg.facade_data import ANSWER_TEXT, render_prompt
from facadeseg.model import build_bundle, merge_lora
from facadeseg.objective import (
    LossWeights,
    bce_loss,
    dice_loss,
    mask_loss,
    miou,
    pixel_accuracy,
    total_loss,
)
from facadeseg.pipeline import (
    desk_generalization_config,
    evaluate,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    segment_image,
    toy_overfit_config,
    train,
)
from facadeseg.text_model import lm_forward, tokenize
from facadeseg.vision import encoder_hash

from test_objective import brute_force_metrics


# --- shared heavy fixtures --------------------------------------------------

@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """22 facades -> 16 train samples; toy preset; returns everything the
    overfit/regime/determinism criteria need."""
    root = str(tmp_path_factory.mktemp("overfit"))
    manifest = facade_data.build_dataset(root, 22, seed=7, styles=("photo",),
                                         rows_choices=(1, 2),
                                         cols_choices=(1, 2))
    config = toy_overfit_config()
    start = time.monotonic()
    bundle, log = train(config, manifest, root)
    elapsed = time.monotonic() - start
    return root, manifest, config, bundle, log, elapsed


@pytest.fixture(scope="module")
def generalization_run(tmp_path_factory):
    """366 photo facades (257 train) plus a 30-facade line-drawing corpus
    the model never sees during training."""
    photo_root = str(tmp_path_factory.mktemp("gen_photo"))
    photo = facade_data.build_dataset(photo_root, 366, seed=11,
                                      styles=("photo",))
    line_root = str(tmp_path_factory.mktemp("gen_line"))
    line = facade_data.build_dataset(line_root, 30, seed=12,
                                     styles=("line_drawing",))
    config = desk_generalization_config()
    bundle, _ = train(config, photo, photo_root)
    return photo_root, photo, line_root, line, bundle


# --- criterion 1: gradient suite -------------------------------------------

def test_criterion_1_gradient_suite():
    start = time.monotonic()
    worst_overall = 0.0
    for seed in range(5):
        report = gradient_check(seed=seed, tol=1e-4, h=1e-5)
        assert report.passed, f"seed {seed}: worst {report.worst()}"
        worst_overall = max(worst_overall, report.worst()[1])
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"gradcheck suite took {elapsed:.1f}s"
    print(f"criterion 1 PASS: 5 seeds, worst rel err {worst_overall:.3e}, "
          f"{elapsed:.1f}s")


# --- criterion 2: loss identity oracle -------------------------------------

def test_criterion_2_loss_identities():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    saturated = np.where(target == 1, 500.0, -500.0)
    assert dice_loss(ad.Tensor(saturated), target).item() == \
        pytest.approx(0.0, abs=1e-12)
    assert bce_loss(ad.Tensor(np.zeros((2, 2))), target).item() == \
        pytest.approx(np.log(2), abs=1e-12)
    doc_target = np.array([[1.0, 1.0], [0.0, 0.0]])
    got = mask_loss(ad.Tensor(np.zeros((2, 2))), doc_target, LossWeights(),
                    eps=1.0).item()
    assert got == pytest.approx(1.586294, abs=1e-6)
    joint = total_loss(ad.Tensor(1.0), ad.Tensor(0.5), LossWeights()).item()
    assert abs(joint - (0.8 * 1.0 + 0.8 * 0.5)) < 1e-15
    print("criterion 2 PASS: dice/bce/mask/total identities hold")


# --- criterion 3: metric oracle equivalence --------------------------------

def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pred = (rng.random((64, 64)) < rng.uniform(0, 1)).astype(np.uint8)
        gt = (rng.random((64, 64)) < rng.uniform(0, 1)).astype(np.uint8)
        ious, mean, pa = brute_force_metrics(pred, gt)
        out = miou(pred, gt)
        assert out["miou"] == mean
        assert pixel_accuracy(pred, gt) == pa
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:, :2] = 1
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[:2, :] = 1
    assert miou(pred, gt)["miou"] == pytest.approx(1 / 3, abs=1e-12)
    assert pixel_accuracy(pred, gt) == 0.5
    print("criterion 3 PASS: 100 random pairs + 4x4 case match brute force")


# --- criterion 4: overfit acceptance ---------------------------------------

def test_criterion_4_overfit(overfit_run):
    root, manifest, config, bundle, _, elapsed = overfit_run
    assert config.max_steps <= 2000
    assert elapsed < 600.0, f"training took {elapsed:.1f}s"
    train_samples = manifest.by_split("train")
    assert len(train_samples) == 16
    result = evaluate(bundle, manifest, root, split="train", tau=config.tau)
    assert result.overall.miou >= 0.90, f"train mIoU {result.overall.miou}"
    for sample in train_samples:
        image, _ = facade_data.load_sample_arrays(root, sample)
        answer, _, _ = segment_image(bundle, image, sample.description,
                                     tau=config.tau, force_seg=False)
        assert answer == ANSWER_TEXT, f"{sample.id}: decoded {answer!r}"
    print(f"criterion 4 PASS: train mIoU {result.overall.miou:.3f} in "
          f"{elapsed:.0f}s; answer verbatim on all 16 samples")


# --- criterion 5: generalization smoke -------------------------------------

def test_criterion_5_generalization(generalization_run):
    photo_root, photo, line_root, line, bundle = generalization_run
    held_out = evaluate(bundle, photo, photo_root, split="test")
    assert held_out.overall.miou >= 0.70, \
        f"held-out photo mIoU {held_out.overall.miou}"
    cross = evaluate(bundle, line, line_root, split="test")
    assert "line_drawing" in cross.by_style
    table = {**held_out.by_style, **cross.by_style}
    assert set(table) == {"photo", "line_drawing"}
    for style, rep in sorted(table.items()):
        assert np.isfinite(rep.miou)
        print(f"  style {style}: miou {rep.miou:.3f} over {rep.count} samples")
    print(f"criterion 5 PASS: held-out photo mIoU "
          f"{held_out.overall.miou:.3f} >= 0.70; per-style table produced")


# --- criterion 6: regime conformance ---------------------------------------

def test_criterion_6_regime_conformance(overfit_run):
    _, _, config, bundle, _, _ = overfit_run
    lm, vis, seg, lora = config.model_configs()
    fresh = build_bundle(lm_cfg=lm, vision_cfg=vis, seg_cfg=seg, lora=lora,
                         init_seed=config.seed, freeze_seed=config.freeze_seed)
    assert encoder_hash(bundle.registry) == encoder_hash(fresh.registry)
    changed = {name for name, tensor, _ in bundle.registry.items()
               if tensor.data.tobytes() !=
               fresh.registry[name].data.tobytes()}
    declared = {name for name, _, trainable in bundle.registry.items()
                if trainable}
    assert changed == declared, (changed ^ declared)
    print(f"criterion 6 PASS: encoder hash fixed; changed set == declared "
          f"trainable set ({len(declared)} tensors)")


# --- criterion 7: adapter-merge equivalence --------------------------------

def test_criterion_7_lora_equivalence():
    # B = 0 at init: adapters must reproduce base logits bitwise
    b = build_bundle(init_seed=0)
    toks = tokenize("adapter identity probe")
    with ad.no_grad():
        _, attached = lm_forward(b.registry, b.lm_cfg, toks, lora=b.lora)
        _, base = lm_forward(b.registry, b.lm_cfg, toks, lora=None)
    assert attached.data.tobytes() == base.data.tobytes()

    worst = 0.0
    for seed in range(10):
        b = build_bundle(init_seed=seed)
        rng = np.random.default_rng(seed)
        for name in b.registry.names():
            if name.startswith("lora."):
                b.registry[name].data = rng.normal(0, 0.05,
                                                   b.registry[name].shape)
        toks = tokenize(f"equivalence input {seed}")
        with ad.no_grad():
            _, attached = lm_forward(b.registry, b.lm_cfg, toks, lora=b.lora)
        merge_lora(b)
        with ad.no_grad():
            _, merged = lm_forward(b.registry, b.lm_cfg, toks, lora=None)
        worst = max(worst, np.abs(attached.data - merged.data).max())
    assert worst < 1e-9
    print(f"criterion 7 PASS: merge max abs diff {worst:.3e} over 10 inputs")


# --- criterion 8: determinism & persistence --------------------------------

def test_criterion_8_determinism_persistence(overfit_run, tmp_path):
    root, manifest, _, _, _, _ = overfit_run
    cfg = pipeline.TrainConfig(max_steps=8, per_device_batch=1, grad_accum=2,
                               lr=1e-3).validate()
    b1, log1 = train(cfg, manifest, root)
    b2, log2 = train(cfg, manifest, root)
    assert log1 == log2

    p1, p2, p3 = (str(tmp_path / f"{n}.ckpt") for n in "abc")
    save_checkpoint(b1, p1, train_seed=cfg.seed)
    loaded, seed_back = load_checkpoint(p1)
    save_checkpoint(loaded, p2, train_seed=seed_back)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    save_checkpoint(b2, p3, train_seed=cfg.seed)
    assert open(p1, "rb").read() == open(p3, "rb").read()

    ev_orig = evaluate(b1, manifest, root, split="test")
    ev_load = evaluate(loaded, manifest, root, split="test")
    assert ev_orig.overall == ev_load.overall
    assert [r for _, _, r in ev_orig.per_sample] == \
        [r for _, _, r in ev_load.per_sample]
    print("criterion 8 PASS: bitwise logs, byte-identical checkpoints, "
          "identical evaluation after reload")


# --- criterion 9: format fidelity ------------------------------------------

def test_criterion_9_format_fidelity(tmp_path):
    assert render_prompt("glazed sections") == (
        "User: <Image> Help me segment the objects in this image according "
        "to glazed sections? SAAF: ")
    assert ANSWER_TEXT == "Understood, it is <SEG>."

    path = str(tmp_path / "m.pgm")
    facade_data.write_mask(np.eye(64, dtype=np.uint8), path)
    assert open(path, "rb").read().startswith(b"P5\n64 64\n255\n")

    samples = [facade_data.ReferringSample(
        id=f"photo-{i:05d}-window", image=f"i{i}.ppm", mask=f"m{i}.pgm",
        target_class="window", description="glazed sections",
        sha256=hashlib.sha256(str(i).encode()).hexdigest())
        for i in range(100)]
    counts = facade_data.split_and_dedup(samples, seed=0).split_counts()
    assert (counts["train"], counts["test"], counts["val"]) == (70, 20, 10)
    print("criterion 9 PASS: template golden string, PGM header bytes, "
          "70/20/10 split")
