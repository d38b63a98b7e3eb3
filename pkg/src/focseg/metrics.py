"""Pixel confusion counts and precision / recall / F1 / IoU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CSV_FIELDS = ("run_id", "split", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    iou: float
    degenerate: bool = False  # some ratio was 0/0 and reported as 0


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _binary(pred, "pred"), _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def report(c: ConfusionCounts) -> MetricsReport:
    precision, d1 = _ratio(c.tp, c.tp + c.fp)
    recall, d2 = _ratio(c.tp, c.tp + c.fn)
    # harmonic mean of precision and recall
    f1, d3 = _ratio(2 * precision * recall, precision + recall)
    iou, d4 = _ratio(c.tp, c.tp + c.fp + c.fn)
    return MetricsReport(precision, recall, f1, iou, degenerate=d1 or d2 or d3 or d4)


def csv_row(run_id: str, split: str, c: ConfusionCounts, r: MetricsReport) -> dict:
    return {
        "run_id": run_id, "split": split, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
        "precision": f"{r.precision:.6f}", "recall": f"{r.recall:.6f}", "f1": f"{r.f1:.6f}", "iou": f"{r.iou:.6f}",
    }
