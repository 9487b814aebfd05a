"""Confusion counts, precision/recall/F1/IoU and cross-dataset aggregation.

Degenerate counts follow one convention throughout: when prediction and
ground truth are both empty every metric is 1; otherwise a ratio with a zero
denominator is 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


ZERO = ConfusionCounts(0, 0, 0, 0)


@dataclass(frozen=True)
class MetricValues:
    precision: float
    recall: float
    f1: float
    iou: float

    def as_percent(self) -> dict:
        return {k: round(100 * getattr(self, k), 2) for k in ("precision", "recall", "f1", "iou")}


def binarize(prob, tau: float = DEFAULT_TAU) -> np.ndarray:
    """1 where ``prob > tau`` (strictly), else 0."""
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {tau}")
    return (np.asarray(prob) > tau).astype(np.uint8)


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def compute_metrics(c: ConfusionCounts) -> MetricValues:
    if c.tp == 0:
        both_empty = c.fp == 0 and c.fn == 0
        v = 1.0 if both_empty else 0.0
        return MetricValues(v, v, v, v)
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    f1 = 2 * precision * recall / (precision + recall)
    iou = c.tp / (c.tp + c.fp + c.fn)
    return MetricValues(precision, recall, f1, iou)


def pooled_counts(preds: Iterable, gts: Iterable) -> ConfusionCounts:
    total = ZERO
    for p, g in zip(preds, gts):
        total = total + confusion(p, g)
    return total


def dataset_metrics(preds: Sequence, gts: Sequence, mode: str = "micro") -> MetricValues:
    """Dataset-level metrics from binary masks.

    ``micro`` pools confusion counts over every pixel of the split;
    ``macro`` averages per-image metrics.
    """
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not len(preds):
        raise ParameterError("no images to score")
    if mode == "micro":
        return compute_metrics(pooled_counts(preds, gts))
    if mode == "macro":
        per_image = [compute_metrics(confusion(p, g)) for p, g in zip(preds, gts)]
        return MetricValues(*(float(np.mean([getattr(m, k) for m in per_image]))
                              for k in ("precision", "recall", "f1", "iou")))
    raise ParameterError(f"mode must be 'micro' or 'macro', got {mode!r}")


@dataclass(frozen=True)
class Aggregate:
    rows: tuple  # (dataset, MetricValues) pairs
    f1_mean: float
    f1_std: float
    iou_mean: float
    iou_std: float


def aggregate(values: Sequence[tuple[str, MetricValues]]) -> Aggregate:
    """Mean and population standard deviation of F1 and IoU across datasets."""
    if not values:
        raise ParameterError("nothing to aggregate")
    f1 = np.array([m.f1 for _, m in values], dtype=np.float64)
    iou = np.array([m.iou for _, m in values], dtype=np.float64)
    return Aggregate(tuple(values), float(f1.mean()), float(f1.std()), float(iou.mean()), float(iou.std()))


CSV_FIELDS = ("dataset", "model", "plan", "precision", "recall", "f1", "iou")


def metrics_csv(rows: Sequence[dict]) -> str:
    """CSV text; metric columns are percentages with two decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow(
            [row["dataset"], row["model"], row["plan"]]
            + [f"{100 * row[k]:.2f}" for k in ("precision", "recall", "f1", "iou")]
        )
    return buf.getvalue()
