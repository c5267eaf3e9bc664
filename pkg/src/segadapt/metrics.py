"""Confusion-matrix accumulation and intersection-over-union."""

from __future__ import annotations

import numpy as np

from . import IGNORE_LABEL


class ConfusionMatrix:
    """C x C integer counts; rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray):
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
        valid = gt != IGNORE_LABEL
        p = np.asarray(pred)[valid].ravel()
        g = np.asarray(gt)[valid].ravel()
        if g.size and (g.max() >= self.num_classes or p.max() >= self.num_classes):
            raise ValueError("label index out of range")
        idx = g * self.num_classes + p
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where the class never appears) and its unweighted mean.

    Classes with zero union (absent from both prediction and ground truth)
    are excluded from the mean.
    """
    counts = cm.counts.astype(float)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    per_class = np.full(cm.num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    miou = float(np.nanmean(per_class)) if present.any() else float("nan")
    return per_class, miou
