"""Confusion-matrix evaluation: per-class IoU and mIoU."""
import numpy as np


class ConfusionMatrix:
    """K x K counts; entry ``(g, p)`` counts pixels with truth g predicted as p."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes) or np.any(counts < 0):
            raise ValueError("counts must be a non-negative K x K matrix")
        self.counts = counts

    def update(self, labels, predictions):
        labels = np.asarray(labels)
        predictions = np.asarray(predictions)
        if labels.shape != predictions.shape:
            raise ValueError(f"shape mismatch {labels.shape} vs {predictions.shape}")
        k = self.num_classes
        for name, arr in (("label", labels), ("prediction", predictions)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} class id out of range [0, {k - 1}]")
        idx = labels.astype(np.int64).ravel() * k + predictions.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self):
        return int(self.counts.sum())

    def iou_per_class(self):
        """IoU per class; NaN where the class has an empty union."""
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self, include_background=True):
        iou = self.iou_per_class()
        if not include_background:
            iou = iou[1:]
        valid = iou[~np.isnan(iou)]
        if valid.size == 0:
            raise ValueError("no class with a non-empty union")
        return float(valid.mean())

    def pixel_accuracy(self):
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.num_classes}, total={self.total})"


def iou_per_class(cm):
    return cm.iou_per_class()


def miou(cm, include_background=True):
    return cm.miou(include_background)
