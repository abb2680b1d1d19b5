"""Loss terms against hand arithmetic and brute-force oracles; metrics
against an independent confusion-matrix implementation."""

import numpy as np
import pytest

import facadeseg.autodiff as ad
from facadeseg.autodiff import Tensor
from facadeseg.errors import NoSupervisedPositions, ShapeMismatch
from facadeseg.objective import (
    LossWeights,
    bce_loss,
    dice_loss,
    mask_loss,
    miou,
    pixel_accuracy,
    text_loss,
    total_loss,
)
from facadeseg.text_model import TokenSequence


# --- text loss --------------------------------------------------------------

def _seq(ids, supervised):
    return TokenSequence(ids=ids, supervise=[i in supervised
                                             for i in range(len(ids))])


def test_text_loss_uniform_logits():
    toks = _seq([5, 6, 7, 8], supervised={2, 3})
    logits = Tensor(np.zeros((4, 101)))
    assert text_loss(logits, toks).item() == pytest.approx(np.log(101),
                                                           abs=1e-12)


def test_text_loss_perfect_prediction():
    toks = _seq([5, 6, 7], supervised={1, 2})
    logits = np.zeros((3, 101))
    logits[0, 6] = 100.0
    logits[1, 7] = 100.0
    assert text_loss(Tensor(logits), toks).item() < 1e-12


def test_text_loss_mean_reduction():
    toks = _seq([5, 6, 7], supervised={1, 2})
    logits = np.zeros((3, 101))
    logits[0, 6] = 100.0  # position 1 perfectly predicted: loss a ~ 0
    # position 2 uniform: loss b = ln(101)
    expected = (0.0 + np.log(101)) / 2
    assert text_loss(Tensor(logits), toks).item() == pytest.approx(expected,
                                                                   abs=1e-12)


def test_text_loss_no_supervised_positions():
    with pytest.raises(NoSupervisedPositions):
        text_loss(Tensor(np.zeros((3, 101))), _seq([5, 6, 7], set()))


# --- bce --------------------------------------------------------------------

def test_bce_zero_logits_is_ln2():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = bce_loss(Tensor(np.zeros((2, 2))), target)
    assert abs(out.item() - np.log(2)) < 1e-12


def test_bce_saturated_correct():
    target = np.array([[1.0, 0.0]])
    logits = np.array([[50.0, -50.0]])
    assert bce_loss(Tensor(logits), target).item() < 1e-20


def test_bce_matches_per_pixel_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 3, (8, 8))
    target = (rng.random((8, 8)) < 0.5).astype(float)
    # direct per-pixel summation oracle
    p = 1 / (1 + np.exp(-logits))
    expected = -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p))
    assert abs(bce_loss(Tensor(logits), target).item() - expected) < 1e-12


def test_bce_finite_for_extreme_logits():
    target = np.ones((2, 2))
    out = bce_loss(Tensor(np.full((2, 2), -700.0)), target)
    assert np.isfinite(out.item())


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


# --- dice -------------------------------------------------------------------

def test_dice_saturated_perfect_is_zero():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    logits = np.where(target == 1, 500.0, -500.0)
    assert dice_loss(Tensor(logits), target).item() == pytest.approx(0.0,
                                                                     abs=1e-12)


def test_dice_all_ones_vs_empty():
    # p saturated to all ones on 2x2, empty target, eps=1 -> 1 - 1/5
    out = dice_loss(Tensor(np.full((2, 2), 500.0)), np.zeros((2, 2)), eps=1.0)
    assert out.item() == pytest.approx(0.8, abs=1e-12)


def test_dice_empty_empty_smoothing():
    out = dice_loss(Tensor(np.full((2, 2), -500.0)), np.zeros((2, 2)), eps=1.0)
    assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_dice_range():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = rng.normal(0, 4, (6, 6))
        target = (rng.random((6, 6)) < 0.5).astype(float)
        v = dice_loss(Tensor(logits), target).item()
        assert 0.0 <= v < 1.0


# --- compositions -----------------------------------------------------------

def test_mask_loss_documented_2x2_case():
    target = np.array([[1.0, 1.0], [0.0, 0.0]])
    out = mask_loss(Tensor(np.zeros((2, 2))), target, LossWeights(), eps=1.0)
    # 2*ln2 + 0.5*(1 - 3/5)
    assert out.item() == pytest.approx(1.586294, abs=1e-6)


def test_mask_loss_zero_weights():
    w = LossWeights(bce=0.0, dice=0.0)
    rng = np.random.default_rng(2)
    out = mask_loss(Tensor(rng.normal(0, 1, (4, 4))),
                    (rng.random((4, 4)) < 0.5).astype(float), w)
    assert out.item() == 0.0


def test_mask_loss_is_exact_linear_composition():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(0, 1, (4, 4)))
    target = (rng.random((4, 4)) < 0.5).astype(float)
    w = LossWeights()
    with ad.no_grad():
        combined = mask_loss(logits, target, w).item()
        parts = (w.bce * bce_loss(logits, target).item()
                 + w.dice * dice_loss(logits, target).item())
    assert abs(combined - parts) < 1e-15


def test_total_loss_default_weights():
    out = total_loss(Tensor(1.0), Tensor(0.5), LossWeights())
    assert abs(out.item() - 1.2) < 1e-15


def test_total_loss_degenerate_weights():
    w = LossWeights(text=0.0, mask=0.8)
    assert total_loss(Tensor(7.0), Tensor(0.5), w).item() == \
        pytest.approx(0.4, abs=1e-15)
    assert total_loss(Tensor(0.0), Tensor(0.0), LossWeights()).item() == 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(text=-0.1)


# --- metrics ----------------------------------------------------------------

def brute_force_metrics(pred, gt):
    """Independent confusion-matrix implementation (pure Python loops)."""
    conf = [[0, 0], [0, 0]]
    for p, g in zip(np.asarray(pred).flat, np.asarray(gt).flat):
        conf[int(g)][int(p)] += 1
    ious = {}
    for cls in (0, 1):
        tp = conf[cls][cls]
        fn = conf[cls][1 - cls]
        fp = conf[1 - cls][cls]
        union = tp + fn + fp
        ious[cls] = tp / union if union else None
    present = [v for v in ious.values() if v is not None]
    pa = (conf[0][0] + conf[1][1]) / max(1, sum(map(sum, conf)))
    return ious, sum(present) / len(present), pa


def test_miou_identity():
    rng = np.random.default_rng(4)
    m = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    assert miou(m, m)["miou"] == 1.0
    assert pixel_accuracy(m, m) == 1.0


def test_miou_half_half_4x4():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:, :2] = 1  # left half
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[:2, :] = 1  # top half
    out = miou(pred, gt)
    assert out["window"] == pytest.approx(1 / 3, abs=1e-12)
    assert out["wall"] == pytest.approx(1 / 3, abs=1e-12)
    assert out["miou"] == pytest.approx(1 / 3, abs=1e-12)
    assert pixel_accuracy(pred, gt) == 0.5


def test_miou_complement_is_zero():
    rng = np.random.default_rng(5)
    gt = (rng.random((6, 6)) < 0.5).astype(np.uint8)
    assert miou(1 - gt, gt)["miou"] == 0.0
    assert pixel_accuracy(1 - gt, gt) == 0.0


def test_metrics_match_brute_force_on_100_pairs():
    rng = np.random.default_rng(6)
    for _ in range(100):
        pred = (rng.random((16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
        gt = (rng.random((16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
        ious, mean, pa = brute_force_metrics(pred, gt)
        out = miou(pred, gt)
        for cls, key in ((0, "wall"), (1, "window")):
            if ious[cls] is None:
                assert np.isnan(out[key])
            else:
                assert out[key] == ious[cls]
        assert out["miou"] == mean
        assert pixel_accuracy(pred, gt) == pa


def test_miou_relabel_symmetry():
    rng = np.random.default_rng(7)
    pred = (rng.random((8, 8)) < 0.4).astype(np.uint8)
    gt = (rng.random((8, 8)) < 0.6).astype(np.uint8)
    a = miou(pred, gt)
    b = miou(1 - pred, 1 - gt)
    assert a["miou"] == b["miou"]
    assert a["window"] == b["wall"]
    assert pixel_accuracy(pred, gt) == pixel_accuracy(1 - pred, 1 - gt)


def test_metrics_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        miou(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        pixel_accuracy(np.zeros((2, 2)), np.zeros((2, 3)))
