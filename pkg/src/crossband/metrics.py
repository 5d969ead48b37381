"""Evaluation metrics over a mergeable confusion-matrix accumulator.

All metrics reduce a ConfusionAccumulator (rows = ground truth, columns =
prediction), so sharded evaluation can fill independent accumulators and
merge them associatively before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricUndefinedError(ValueError):
    """The metric has no value on this accumulator (e.g. no observations)."""


@dataclass
class ConfusionAccumulator:
    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError(f"counts shape {self.counts.shape} != K x K")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    def update(self, ground_truth, prediction) -> "ConfusionAccumulator":
        gt = np.asarray(ground_truth).reshape(-1).astype(np.int64)
        pred = np.asarray(prediction).reshape(-1).astype(np.int64)
        if gt.shape != pred.shape:
            raise ValueError(f"gt/pred length mismatch: {gt.shape} vs {pred.shape}")
        k = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"labels outside [0, {k})")
        flat = np.bincount(gt * k + pred, minlength=k * k)
        self.counts += flat.reshape(k, k)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        return ConfusionAccumulator(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accuracy(acc: ConfusionAccumulator) -> float:
    if acc.total == 0:
        raise MetricUndefinedError("accuracy undefined on an empty accumulator")
    return float(np.trace(acc.counts)) / acc.total


def f1_binary(acc: ConfusionAccumulator, positive: int = 1) -> float:
    """2TP / (2TP + FP + FN); 0 when the denominator is 0."""
    if acc.num_classes != 2:
        raise ValueError("binary F1 requires a 2-class accumulator")
    if positive not in (0, 1):
        raise ValueError("positive class must be 0 or 1")
    tp = acc.counts[positive, positive]
    fp = acc.counts[1 - positive, positive]
    fn = acc.counts[positive, 1 - positive]
    denom = 2 * tp + fp + fn
    return float(2 * tp) / denom if denom else 0.0


def f1_multilabel(per_label: list[ConfusionAccumulator], average: str = "macro",
                  positive: int = 1) -> float:
    """Aggregate binary F1 over labels: macro (mean of per-label F1) or micro."""
    if not per_label:
        raise MetricUndefinedError("multilabel F1 needs at least one label")
    if average == "macro":
        return float(np.mean([f1_binary(a, positive) for a in per_label]))
    if average == "micro":
        tp = sum(int(a.counts[positive, positive]) for a in per_label)
        fp = sum(int(a.counts[1 - positive, positive]) for a in per_label)
        fn = sum(int(a.counts[positive, 1 - positive]) for a in per_label)
        denom = 2 * tp + fp + fn
        return float(2 * tp) / denom if denom else 0.0
    raise ValueError(f"unknown averaging {average!r}")


def iou_per_class(acc: ConfusionAccumulator) -> tuple[np.ndarray, np.ndarray]:
    """Returns (iou values, presence mask); absent classes get IoU nan."""
    tp = np.diag(acc.counts).astype(np.float64)
    row = acc.counts.sum(axis=1).astype(np.float64)
    col = acc.counts.sum(axis=0).astype(np.float64)
    union = row + col - tp
    present = union > 0
    iou = np.full(acc.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return iou, present


def miou(acc: ConfusionAccumulator) -> float:
    """Mean IoU over classes present in ground truth or prediction."""
    if acc.num_classes < 2:
        raise ValueError("mIoU requires at least 2 classes")
    iou, present = iou_per_class(acc)
    if not present.any():
        raise MetricUndefinedError("mIoU undefined: no class present")
    return float(iou[present].mean())


def biou_minority(acc: ConfusionAccumulator) -> float:
    """IoU of the minority class (fewer ground-truth pixels; tie -> class 1)."""
    if acc.num_classes != 2:
        raise ValueError("minority-class IoU requires a 2-class accumulator")
    gt_counts = acc.counts.sum(axis=1)
    minority = 1 if gt_counts[1] <= gt_counts[0] else 0
    iou, present = iou_per_class(acc)
    if not present[minority]:
        raise MetricUndefinedError("minority class absent from ground truth and prediction")
    return float(iou[minority])


def multilabel_accumulators(gt_bits: np.ndarray, pred_bits: np.ndarray) -> list[ConfusionAccumulator]:
    """One 2-class accumulator per label column of (N, L) bit arrays."""
    gt_bits = np.asarray(gt_bits).astype(np.int64)
    pred_bits = np.asarray(pred_bits).astype(np.int64)
    if gt_bits.shape != pred_bits.shape:
        raise ValueError("bit array shapes differ")
    accs = []
    for j in range(gt_bits.shape[1]):
        accs.append(ConfusionAccumulator(2).update(gt_bits[:, j], pred_bits[:, j]))
    return accs


METRIC_NAMES = ("accuracy", "f1", "f1_multilabel", "miou", "biou")


def score(metric: str, acc) -> float:
    """Dispatch by serialized metric name; ``acc`` is an accumulator or list."""
    if metric == "accuracy":
        return accuracy(acc)
    if metric == "f1":
        return f1_binary(acc)
    if metric == "f1_multilabel":
        return f1_multilabel(acc)
    if metric == "miou":
        return miou(acc)
    if metric == "biou":
        return biou_minority(acc)
    raise ValueError(f"unknown metric {metric!r}; known: {METRIC_NAMES}")
