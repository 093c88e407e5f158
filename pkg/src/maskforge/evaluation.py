"""Pixel-level evaluation of binary tamper masks.

White (255) is the positive class. All counting is integer-exact; ratio metrics
are derived from the pooled integer counts. Dataset-level numbers are
micro-averaged: confusion counts are summed over every pixel of every image
first, ratios are computed once at the end.

Conventions for empty denominators:
  precision, recall, accuracy -> 0.0 when undefined,
  F1, IoU                     -> 0.0 when undefined, EXCEPT the degenerate
  all-true-negative case (TP = FP = FN = 0) which scores 1.0 and sets the
  ``degenerate`` flag on the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WHITE = 255
REPORT_SCHEMA = "maskforge-report/1"


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name}: expected a 2-d mask, got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, WHITE)).all():
        raise ValueError(f"{name}: mask values must be in {{0, {WHITE}}}, got {vals[:8]}")
    return mask == WHITE


@dataclass(frozen=True)
class ConfusionCounts:
    """Integer pixel counts; white is positive."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


ZERO_COUNTS = ConfusionCounts(0, 0, 0, 0)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Count TP/FP/FN/TN between two {0,255} masks of identical shape."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    iou: float
    accuracy: float
    degenerate: bool = False
    per_image: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {
            "counts": self.counts.as_dict(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
            "accuracy": self.accuracy,
            "degenerate": self.degenerate,
        }
        if self.per_image:
            d["per_image"] = self.per_image
        return d


def metrics(counts: ConfusionCounts) -> MetricsReport:
    """Derive precision/recall/F1/IoU/accuracy from integer confusion counts."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if min(tp, fp, fn, tn) < 0:
        raise ValueError(f"negative confusion count: {counts}")
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    accuracy = (tp + tn) / counts.total if counts.total > 0 else 0.0
    degenerate = tp == 0 and fp == 0 and fn == 0
    if degenerate:
        # nothing to find and nothing found: perfect by convention
        f1 = 1.0
        iou = 1.0
    else:
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        iou = tp / (tp + fn + fp) if (tp + fn + fp) > 0 else 0.0
    return MetricsReport(counts, precision, recall, f1, iou, accuracy, degenerate)


def evaluate_pairs(
    items: list[tuple[str, np.ndarray, np.ndarray]],
) -> MetricsReport:
    """Micro-average metrics over (pair_id, pred_mask, gt_mask) items.

    Pooled counts drive the headline metrics; a per-image table rides along.
    """
    if not items:
        raise ValueError("no (pred, gt) pairs to evaluate")
    pooled = ZERO_COUNTS
    rows = []
    for pair_id, pred, gt in items:
        c = confusion(pred, gt)
        pooled = pooled + c
        m = metrics(c)
        rows.append(
            {
                "pair_id": pair_id,
                **c.as_dict(),
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "iou": m.iou,
                "accuracy": m.accuracy,
            }
        )
    report = metrics(pooled)
    report.per_image = rows
    return report


def report_to_json(report: MetricsReport, split: str | None = None) -> str:
    """Serialize a report to the versioned JSON document the CLI emits."""
    doc = {"schema": REPORT_SCHEMA}
    if split is not None:
        doc["split"] = split
    doc.update(report.as_dict())
    return json.dumps(doc, indent=2, sort_keys=False)


def save_report(report: MetricsReport, path: str | Path, split: str | None = None) -> None:
    Path(path).write_text(report_to_json(report, split=split) + "\n")
