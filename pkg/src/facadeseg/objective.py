"""Joint training objective and evaluation metrics.

Text loss: mean next-token cross-entropy over supervised (answer) positions.
Mask loss: weighted per-pixel binary cross-entropy plus smoothed Dice.
Total:     weighted sum of the two.
Metrics:   two-class IoU / mIoU and pixel accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFinite, NoSupervisedPositions, ShapeMismatch
from .text_model import spliced_index


@dataclass
class LossWeights:
    text: float = 0.8
    mask: float = 0.8
    bce: float = 2.0
    dice: float = 0.5

    def __post_init__(self):
        if min(self.text, self.mask, self.bce, self.dice) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class MetricsReport:
    iou_window: float
    iou_wall: float
    miou: float
    pixel_accuracy: float
    count: int = 1


def text_loss(logits, tokens, n_image_tokens=None):
    """Mean -log p(target) over supervised positions, next-token shifted.

    `logits` covers the spliced sequence; when `n_image_tokens` is omitted
    it is recovered from the length difference.
    """
    T = logits.shape[0]
    if n_image_tokens is None:
        n_image_tokens = T - len(tokens.ids) + 1 if T != len(tokens.ids) else 0
    sup = [i for i, s in enumerate(tokens.supervise) if s]
    if not sup:
        raise NoSupervisedPositions("no supervised positions in sequence")
    rows = [spliced_index(tokens, i, n_image_tokens) - 1 for i in sup]
    if min(rows) < 0:
        raise ShapeMismatch("supervised position without a predecessor")
    targets = [tokens.ids[i] for i in sup]

    picked = ad.gather_rows(logits, rows)  # n_sup x V
    # log-softmax with a constant (detached) row max for stability
    rowmax = Tensor(picked.data.max(axis=-1, keepdims=True))
    shifted = ad.add(picked, ad.scale(rowmax, -1.0))
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=-1, keepdims=True))
    logprobs = ad.add(shifted, ad.scale(lse, -1.0))
    onehot = np.zeros(picked.shape)
    onehot[np.arange(len(sup)), targets] = 1.0
    return ad.scale(ad.tsum(ad.mul(logprobs, Tensor(onehot))),
                    -1.0 / len(sup))


def _check_mask_dims(logits, target):
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {target.shape}")
    return target


def bce_loss(logits, target):
    """Mean per-pixel binary cross-entropy on logits, in the stable
    softplus(z) - z*t form."""
    target = _check_mask_dims(logits, target)
    per_pixel = ad.add(ad.softplus(logits),
                       ad.scale(ad.mul(logits, Tensor(target)), -1.0))
    return ad.tmean(per_pixel)


def dice_loss(logits, target, eps=1.0):
    """1 - smoothed Dice coefficient between sigmoid(logits) and target."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    target = _check_mask_dims(logits, target)
    p = ad.sigmoid(logits)
    t = Tensor(target)
    inter = ad.tsum(ad.mul(p, t))
    num = ad.add(ad.scale(inter, 2.0), Tensor(eps))
    den = ad.add(ad.add(ad.tsum(p), ad.tsum(t)), Tensor(eps))
    return ad.add(Tensor(1.0), ad.scale(ad.div(num, den), -1.0))


def mask_loss(logits, target, weights, eps=1.0):
    return ad.add(ad.scale(bce_loss(logits, target), weights.bce),
                  ad.scale(dice_loss(logits, target, eps), weights.dice))


def total_loss(l_text, l_mask, weights):
    lt = l_text if isinstance(l_text, Tensor) else Tensor(float(l_text))
    lm = l_mask if isinstance(l_mask, Tensor) else Tensor(float(l_mask))
    if not (np.isfinite(lt.data).all() and np.isfinite(lm.data).all()):
        raise NonFinite("non-finite loss term")
    return ad.add(ad.scale(lt, weights.text), ad.scale(lm, weights.mask))


# --- metrics ---------------------------------------------------------------

def _as_binary(mask):
    m = np.asarray(mask)
    return (m != 0)


def miou(pred, gt):
    """Two-class IoU (window=1, wall/background=0) and their mean.

    A class empty in both masks is excluded from the mean; its IoU is
    reported as NaN.
    """
    pred, gt = _as_binary(pred), _as_binary(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    ious = {}
    for cls in (0, 1):
        p = pred == cls
        g = gt == cls
        union = np.logical_or(p, g).sum()
        ious[cls] = np.logical_and(p, g).sum() / union if union else float("nan")
    present = [v for v in ious.values() if not np.isnan(v)]
    mean = float(np.mean(present)) if present else float("nan")
    return {"wall": ious[0], "window": ious[1], "miou": mean}


def pixel_accuracy(pred, gt):
    pred, gt = _as_binary(pred), _as_binary(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return float((pred == gt).mean())


def metrics_report(pred, gt):
    m = miou(pred, gt)
    return MetricsReport(iou_window=m["window"], iou_wall=m["wall"],
                         miou=m["miou"], pixel_accuracy=pixel_accuracy(pred, gt))


def merge_reports(reports):
    """Average per-sample reports (mean of per-sample mIoU, IoUs, PA)."""
    if not reports:
        raise ValueError("no reports to merge")
    return MetricsReport(
        iou_window=float(np.nanmean([r.iou_window for r in reports])),
        iou_wall=float(np.nanmean([r.iou_wall for r in reports])),
        miou=float(np.mean([r.miou for r in reports])),
        pixel_accuracy=float(np.mean([r.pixel_accuracy for r in reports])),
        count=sum(r.count for r in reports))
