"""Confusion-matrix segmentation metrics: IoU, accuracy and range-binned mIoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, LabelError

DEFAULT_BIN_EDGES = tuple(float(e) for e in range(0, 55, 5))


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise DimensionError("cannot add confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.ignored == other.ignored and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_id: int) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one batch of (prediction, truth) pairs."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred has {pred.size} entries, gt has {gt.size}")
    k = cm.num_classes
    keep = gt != ignore_id
    bad_gt = keep & ((gt < 0) | (gt >= k))
    if bad_gt.any():
        i = int(np.flatnonzero(bad_gt)[0])
        raise LabelError(f"ground-truth id {gt[i]} at index {i} outside [0, {k})", i)
    bad_pred = keep & ((pred < 0) | (pred >= k))
    if bad_pred.any():
        i = int(np.flatnonzero(bad_pred)[0])
        raise LabelError(f"predicted id {pred[i]} at index {i} outside [0, {k})", i)
    counts = np.bincount(gt[keep] * k + pred[keep], minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts, cm.ignored + int((~keep).sum()))


@dataclass(frozen=True)
class ClassScores:
    """Per-class values (NaN where the class is not present) and their mean."""

    per_class: np.ndarray
    mean: float
    present: np.ndarray = field(repr=False)


def _scores(num: np.ndarray, den: np.ndarray, zero_absent: bool) -> ClassScores:
    present = den > 0
    per_class = np.full(num.shape, np.nan)
    per_class[present] = num[present] / den[present]
    if zero_absent:
        vals = np.where(present, per_class, 0.0)
    else:
        vals = per_class[present]
    mean = float(vals.sum() / vals.size) if vals.size else float("nan")
    return ClassScores(per_class, mean, present)


def iou(cm: ConfusionMatrix, zero_absent: bool = False) -> ClassScores:
    """``TP / (TP + FP + FN)`` per class.

    Classes with a zero denominator are not present; they are left out of the
    mean unless ``zero_absent`` scores them as 0.
    """
    c = cm.counts
    tp = np.diag(c).astype(np.int64)
    den = c.sum(axis=1) + c.sum(axis=0) - tp
    return _scores(tp, den, zero_absent)


def acc(cm: ConfusionMatrix, zero_absent: bool = False) -> ClassScores:
    """``TP / (TP + FN)`` per class."""
    c = cm.counts
    return _scores(np.diag(c).astype(np.int64), c.sum(axis=1), zero_absent)


@dataclass(frozen=True)
class RangeBin:
    low: float
    high: float
    matrix: ConfusionMatrix
    miou: float | None  # None when the bin has no scored class


def range_binned_miou(pred, gt, ranges, num_classes: int, ignore_id: int,
                      bin_edges=DEFAULT_BIN_EDGES, zero_absent: bool = False) -> list[RangeBin]:
    """Independent confusion matrix and mIoU for each ``[edge_i, edge_i+1)`` range bin."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or not np.all(np.diff(edges) > 0):
        raise ConfigError(f"bin edges must be strictly increasing, got {list(bin_edges)}")
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1)
    if not (pred.size == gt.size == ranges.size):
        raise DimensionError(f"pred/gt/ranges lengths differ: {pred.size}, {gt.size}, {ranges.size}")
    which = np.searchsorted(edges, ranges, side="right") - 1
    out = []
    for b in range(edges.size - 1):
        sel = which == b
        cm = accumulate(ConfusionMatrix.empty(num_classes), pred[sel], gt[sel], ignore_id)
        score = iou(cm, zero_absent)
        miou = None if cm.counts.sum() == 0 or np.isnan(score.mean) else score.mean
        out.append(RangeBin(float(edges[b]), float(edges[b + 1]), cm, miou))
    return out
