"""Segmentation and multi-label metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _pair(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    if preds.size == 0:
        raise ValueError("empty prediction set")
    return preds, labels


def iou_per_class(preds, labels, num_classes: int) -> np.ndarray:
    """TP / (T + P - TP) per class; NaN for classes absent from both preds and labels."""
    preds, labels = _pair(preds, labels)
    tp = np.bincount(labels[preds == labels], minlength=num_classes)[:num_classes]
    t = np.bincount(labels, minlength=num_classes)[:num_classes]
    p = np.bincount(preds, minlength=num_classes)[:num_classes]
    union = t + p - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(preds, labels, num_classes: int) -> float:
    ious = iou_per_class(preds, labels, num_classes)
    return float(np.nanmean(ious))


def overall_accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float((preds == labels).mean())


def micro_f1(preds, targets) -> float:
    """F1 from true/predicted positives pooled over all vertices and classes."""
    preds, targets = _pair(preds, targets)
    p = preds.astype(bool)
    t = targets.astype(bool)
    tp = int(np.count_nonzero(p & t))
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(p)
    recall = tp / np.count_nonzero(t)
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    """Evaluation result; fields that do not apply to the task stay ``None``."""

    oa: float | None = None
    miou: float | None = None
    mf1: float | None = None
    iou: list[float] | None = None
    loss_trace: list[float] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, preds, labels, num_classes, multilabel=False):
        if multilabel:
            return cls(mf1=micro_f1(preds, labels))
        ious = iou_per_class(preds, labels, num_classes)
        return cls(oa=overall_accuracy(preds, labels), miou=float(np.nanmean(ious)),
                   iou=[float(v) for v in ious])

    def primary(self) -> float:
        """The model-selection score: m-F1 for multi-label tasks, mIoU otherwise."""
        return self.mf1 if self.mf1 is not None else self.miou
