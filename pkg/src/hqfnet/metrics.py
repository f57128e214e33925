"""Segmentation metrics: confusion matrix, mean IoU, overall accuracy."""

from __future__ import annotations

import numpy as np


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """Integer counts indexed [true class, predicted class]."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        if n_classes < 1:
            raise MetricsError("need at least one class")
        self.n_classes = n_classes
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n_classes, n_classes) or (counts < 0).any():
            raise MetricsError(f"invalid counts for {n_classes} classes")
        self.counts = counts

    def add(self, truth: np.ndarray, pred: np.ndarray, ignore_index: int | None = None) -> None:
        truth = np.asarray(truth).ravel()
        pred = np.asarray(pred).ravel()
        if truth.shape != pred.shape:
            raise MetricsError(f"truth size {truth.size} vs prediction size {pred.size}")
        keep = np.ones(truth.shape, dtype=bool)
        if ignore_index is not None:
            keep = truth != ignore_index
        t, p = truth[keep], pred[keep]
        if t.size and (t.min() < 0 or t.max() >= self.n_classes
                       or p.min() < 0 or p.max() >= self.n_classes):
            raise MetricsError("class id out of range")
        flat = np.bincount(t * self.n_classes + p, minlength=self.n_classes ** 2)
        self.counts += flat.reshape(self.n_classes, self.n_classes)

    def total(self) -> int:
        return int(self.counts.sum())


def compute_metrics(cm: ConfusionMatrix) -> tuple[float, float]:
    """(mIoU, OA) as fractions; classes with an empty union are excluded."""
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    tp = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - tp
    present = union > 0
    miou = float((tp[present] / union[present]).mean())
    oa = float(tp.sum() / total)
    return miou, oa
