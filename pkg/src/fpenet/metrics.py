"""Confusion-matrix based segmentation metrics."""
from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError


class ConfusionMatrix:
    """Counts indexed ``[true class][predicted class]``."""

    def __init__(self, num_classes, ignore_index=None):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target):
        pred = np.asarray(pred).ravel()
        target = np.asarray(target).ravel()
        if pred.shape != target.shape:
            raise ValueError(f"prediction has {pred.size} pixels, target has {target.size}")
        keep = (target >= 0) & (target < self.num_classes)
        if self.ignore_index is not None:
            keep &= target != self.ignore_index
        idx = self.num_classes * target[keep].astype(np.int64) + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(self.num_classes, self.num_classes)
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    @classmethod
    def from_counts(cls, counts, ignore_index=None):
        counts = np.asarray(counts, dtype=np.int64)
        cm = cls(counts.shape[0], ignore_index)
        cm.counts = counts.copy()
        return cm


def miou(cm):
    """Return ``(per_class_iou, mean_iou, pixel_accuracy)``.

    Classes absent from both truth and prediction get ``nan`` and are left
    out of the mean.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    total = counts.sum()
    if total == 0:
        raise UndefinedMetricError("mIoU is undefined for an empty confusion matrix")
    diag = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, diag / union, np.nan)
    mean = float(np.nanmean(iou))
    return iou.tolist(), mean, float(diag.sum() / total)
