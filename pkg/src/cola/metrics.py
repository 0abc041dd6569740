"""Confusion-matrix accumulation and intersection-over-union scores.

Rows are ground truth, columns are predictions, counts are exact integers.
Ground-truth rows carrying the ignore id are skipped at accumulation, so
matrices from disjoint batches add. Per-class IoU is diag / (row + col -
diag); classes absent from both axes are marked NaN and, by default,
excluded from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

DEFAULT_IGNORE = -1


class OutOfRangeClass(DataError):
    """A prediction or non-ignored ground-truth id is outside [0, n_classes)."""


class NoEvaluableClass(DataError):
    """Every class is absent; the mean IoU is undefined."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DataError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def empty_confusion(n_classes: int) -> ConfusionMatrix:
    if n_classes < 1:
        raise ValueError("need at least one class")
    return ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))


def accumulate(
    cm: ConfusionMatrix,
    predictions: np.ndarray,
    ground_truth: np.ndarray,
    ignore_id: int = DEFAULT_IGNORE,
) -> ConfusionMatrix:
    """New matrix with one count added per non-ignored (truth, prediction) pair."""
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(ground_truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise DataError("predictions and ground truth differ in length")
    n = cm.n_classes
    keep = truth != ignore_id
    preds = preds[keep]
    truth = truth[keep]
    if truth.size:
        if truth.min() < 0 or truth.max() >= n:
            raise OutOfRangeClass(f"ground-truth id outside [0, {n})")
        if preds.min() < 0 or preds.max() >= n:
            raise OutOfRangeClass(f"prediction id outside [0, {n})")
    batch = np.bincount(truth * n + preds, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + batch)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both axes."""
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    out = np.full(cm.n_classes, np.nan)
    present = union > 0
    out[present] = diag[present] / union[present]
    return out


def miou(cm: ConfusionMatrix, mode: str = "present") -> float:
    """Mean IoU over evaluable classes.

    ``mode="present"`` averages over classes seen on either axis;
    ``mode="all"`` scores absent classes as 0 instead of dropping them.
    """
    ious = iou_per_class(cm)
    present = ~np.isnan(ious)
    if not present.any():
        raise NoEvaluableClass("confusion matrix has no evaluable class")
    if mode == "present":
        return float(ious[present].mean())
    if mode == "all":
        return float(np.where(present, ious, 0.0).mean())
    raise ValueError(f"unknown averaging mode {mode!r}")


def format_iou_table(cm: ConfusionMatrix, class_names: list[str] | None = None) -> str:
    """Human-readable per-class IoU table plus the mean."""
    ious = iou_per_class(cm)
    names = class_names or [f"class_{i}" for i in range(cm.n_classes)]
    width = max(len(n) for n in names) + 2
    lines = []
    for i, name in enumerate(names):
        value = "absent" if np.isnan(ious[i]) else f"{ious[i]:.4f}"
        lines.append(f"{name:<{width}}{value}")
    lines.append(f"{'mIoU':<{width}}{miou(cm):.4f}")
    return "\n".join(lines)


def iou_csv_rows(cm: ConfusionMatrix, class_names: list[str] | None = None) -> str:
    """Machine-readable per-class rows: class_id,class_name,iou."""
    ious = iou_per_class(cm)
    names = class_names or [f"class_{i}" for i in range(cm.n_classes)]
    lines = ["class_id,class_name,iou"]
    for i, name in enumerate(names):
        value = "" if np.isnan(ious[i]) else format(ious[i], ".17g")
        lines.append(f"{i},{name},{value}")
    return "\n".join(lines) + "\n"
