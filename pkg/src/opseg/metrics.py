"""Pixel confusion metrics, overlap scores and ranked-detection AP.

Zero-denominator convention: a ratio whose denominator is empty is 1 when
the set it measures is empty on both sides (nothing to find, nothing
predicted), else 0.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .cascade import BBox

FOREGROUND_CLASSES = tuple(range(1, 10))
METRIC_NAMES = ("precision", "sensitivity", "accuracy", "iou", "dsc")
TABLE_COLUMNS = ("Precision", "Sensitivity", "Accuracy", "Mean IoU", "DSC")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_shapes(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _check_shapes(pred, gt)
    p, g = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def precision(c: ConfusionCounts) -> float:
    den = c.tp + c.fp
    if den == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / den


def sensitivity(c: ConfusionCounts) -> float:
    den = c.tp + c.fn
    if den == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / den


def accuracy(c: ConfusionCounts) -> float:
    # (TP + TN) / total; the printed TP + FP numerator contradicts the definition
    if c.total == 0:
        return 1.0
    return (c.tp + c.tn) / c.total


def iou_counts(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def dsc_counts(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def iou_mask(pred, gt) -> float:
    return iou_counts(confusion(pred, gt))


def dsc_mask(pred, gt) -> float:
    return dsc_counts(confusion(pred, gt))


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float]]
    mean: dict[str, float]
    detection: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "opseg/1",
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "mean": dict(self.mean),
            "detection": dict(self.detection),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            per_class={int(k): dict(v) for k, v in d["per_class"].items()},
            mean=dict(d["mean"]),
            detection=dict(d.get("detection", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def table_row(self) -> list[float]:
        """Mean metrics in Precision, Sensitivity, Accuracy, Mean IoU, DSC order."""
        return [self.mean[k] for k in METRIC_NAMES]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        w.writerow([repr(v) for v in self.table_row()])
        return buf.getvalue()


def class_metrics(c: ConfusionCounts) -> dict[str, float]:
    return {
        "precision": precision(c),
        "sensitivity": sensitivity(c),
        "accuracy": accuracy(c),
        "iou": iou_counts(c),
        "dsc": dsc_counts(c),
    }


def report(pred, gt, classes=FOREGROUND_CLASSES) -> MetricsReport:
    """One-vs-rest metrics per foreground class and their unweighted means.

    ``pred``/``gt`` may be single masks or stacks; counts are pooled over
    every pixel given.
    """
    pred, gt = _check_shapes(pred, gt)
    per_class = {c: class_metrics(confusion(pred == c, gt == c)) for c in classes}
    mean = {k: float(np.mean([per_class[c][k] for c in classes])) for k in METRIC_NAMES}
    return MetricsReport(per_class, mean)


def mean_report(reports) -> MetricsReport:
    """Entrywise average of several reports (e.g. one per slice)."""
    reports = list(reports)
    if not reports:
        raise ValueError("mean_report: no reports given")
    classes = sorted(reports[0].per_class)
    per_class = {
        c: {k: float(np.mean([r.per_class[c][k] for r in reports])) for k in METRIC_NAMES} for c in classes
    }
    mean = {k: float(np.mean([r.mean[k] for r in reports])) for k in METRIC_NAMES}
    return MetricsReport(per_class, mean)


def slice_report(preds, gts) -> MetricsReport:
    """Per-slice reports averaged over slices."""
    return mean_report(report(p, g) for p, g in zip(preds, gts, strict=True))


# -- detection -------------------------------------------------------------------------


def bbox_iou(a, b) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class Detection:
    bbox: "BBox"
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


def average_precision(dets, gts, iou_thresh: float) -> float:
    """All-point interpolated AP of ranked detections against ``gts``.

    Detections are ranked by confidence (ties: larger box first) and each
    is greedily matched to the still-unmatched ground truth of highest IoU
    at or above ``iou_thresh``.
    """
    dets = list(dets)
    gts = list(gts)
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, -dets[i].bbox.area, i))
    matched = [False] * len(gts)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            v = bbox_iou(dets[i].bbox, g)
            if v >= iou_thresh and v > best:
                best, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    prec = ctp / np.arange(1, len(dets) + 1)
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def map_range(dets, gts) -> float:
    """Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95."""
    dets, gts = list(dets), list(gts)
    return float(np.mean([average_precision(dets, gts, t) for t in MAP_THRESHOLDS]))
