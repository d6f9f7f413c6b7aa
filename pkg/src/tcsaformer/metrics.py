"""Dice similarity and intersection-over-union for class-index masks."""

from __future__ import annotations

import numpy as np


def _counts(pred, gt, num_classes):
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"mask sizes differ: {pred.size} vs {gt.size}")
    for c in range(num_classes):
        p, g = pred == c, gt == c
        yield int((p & g).sum()), int(p.sum()), int(g.sum())


def dice_per_class(pred, gt, num_classes: int) -> np.ndarray:
    """2|P & G| / (|P| + |G|) per class; a class absent from both scores 1."""
    return np.array([1.0 if p + g == 0 else 2 * i / (p + g) for i, p, g in _counts(pred, gt, num_classes)])


def iou_per_class(pred, gt, num_classes: int) -> np.ndarray:
    return np.array([1.0 if p + g == 0 else i / (p + g - i) for i, p, g in _counts(pred, gt, num_classes)])


def metrics(pred, gt, num_classes: int) -> dict:
    dsc = dice_per_class(pred, gt, num_classes)
    iou = iou_per_class(pred, gt, num_classes)
    return {"dsc": dsc, "mean_dsc": float(dsc.mean()), "iou": iou, "miou": float(iou.mean())}
