"""Figure and delimited-output rendering for training and evaluation runs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_metrics_csv(result, path):
    """Per-style metric table plus an overall row, comma-delimited."""
    lines = ["group,samples,iou_window,iou_wall,miou,pixel_accuracy"]
    rows = list(result.by_style.items()) + [("overall", result.overall)]
    for name, rep in rows:
        lines.append("%s,%d,%.6f,%.6f,%.6f,%.6f" % (
            name, rep.count, rep.iou_window, rep.iou_wall, rep.miou,
            rep.pixel_accuracy))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_loss_curves(log, path):
    """Loss-log lines ("step,L_t,L_m,L") -> per-term training curves."""
    rows = np.array([[float(v) for v in line.split(",")] for line in log])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(rows[:, 0], rows[:, 3], label="total", lw=1.2)
    ax.plot(rows[:, 0], rows[:, 1], label="text", lw=0.9, alpha=0.8)
    ax.plot(rows[:, 0], rows[:, 2], label="mask", lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_style_breakdown(result, path):
    """Grouped bar chart of mIoU and pixel accuracy per style."""
    styles = list(result.by_style)
    miou = [result.by_style[s].miou for s in styles]
    pa = [result.by_style[s].pixel_accuracy for s in styles]
    x = np.arange(len(styles))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(x - 0.2, miou, width=0.4, label="mIoU")
    ax.bar(x + 0.2, pa, width=0.4, label="pixel accuracy")
    ax.axhline(result.overall.miou, color="k", ls="--", lw=0.8,
               label="overall mIoU")
    ax.set_xticks(x, styles)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_mask_overlay(image, mask, path, gt=None):
    """Input image with the predicted (and optional ground-truth) mask."""
    n = 2 if gt is None else 3
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3.2))
    axes[0].imshow(image)
    axes[0].set_title("input")
    axes[1].imshow(mask, cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("predicted")
    if gt is not None:
        axes[2].imshow(gt, cmap="gray", vmin=0, vmax=1)
        axes[2].set_title("ground truth")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_train_report(log, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    from .pipeline import write_loss_log
    write_loss_log(log, os.path.join(out_dir, "loss_log.csv"))
    save_loss_curves(log, os.path.join(out_dir, "loss_curves.png"))


def write_eval_report(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(result, os.path.join(out_dir, "metrics.csv"))
    save_style_breakdown(result, os.path.join(out_dir, "style_miou.png"))
