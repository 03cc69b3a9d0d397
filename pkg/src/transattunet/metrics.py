"""Threshold binarization, confusion counts and overlap metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("dice", "iou", "acc", "rec", "pre")


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    """1 where p >= threshold, else 0."""
    return (np.asarray(p) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"confusion counts must be nonnegative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(mask, y) -> ConfusionCounts:
    mask, y = np.asarray(mask), np.asarray(y)
    if mask.shape != y.shape:
        raise ValueError(f"confusion: mask shape {mask.shape} != target shape {y.shape}")
    for name, a in (("mask", mask), ("target", y)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"confusion: {name} is not binary")
    m, t = mask.astype(bool), y.astype(bool)
    tp = int(np.count_nonzero(m & t))
    fp = int(np.count_nonzero(m & ~t))
    fn = int(np.count_nonzero(~m & t))
    return ConfusionCounts(tp, int(m.size) - tp - fp - fn, fp, fn)


@dataclass
class MetricsReport:
    """Per-image metrics. ``empty_convention`` marks ratios that were 0/0."""

    id: str
    counts: ConfusionCounts
    dice: float
    iou: float
    acc: float
    rec: float
    pre: float
    empty_convention: list[str] = field(default_factory=list)

    def row(self) -> dict:
        c = self.counts
        return {"id": self.id, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn, **{k: getattr(self, k) for k in METRIC_NAMES}}


def _ratio(num: int, den: int, c: ConfusionCounts, name: str, flagged: list[str]) -> float:
    if den:
        return num / den
    flagged.append(name)
    # empty prediction against empty truth counts as perfect
    return 1.0 if c.tp + c.fp + c.fn == 0 else 0.0


def metrics(c: ConfusionCounts, sample_id: str = "") -> MetricsReport:
    flagged: list[str] = []
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c, "dice", flagged)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, c, "iou", flagged)
    acc = _ratio(c.tp + c.tn, c.total, c, "acc", flagged)
    rec = _ratio(c.tp, c.tp + c.fn, c, "rec", flagged)
    pre = _ratio(c.tp, c.tp + c.fp, c, "pre", flagged)
    return MetricsReport(sample_id, c, dice, iou, acc, rec, pre, flagged)


@dataclass
class AggregateReport:
    """Macro averages over images (each metric is the mean of per-image values)."""

    per_image: list[MetricsReport]

    def mean(self, name: str) -> float:
        if not self.per_image:
            return float("nan")
        return float(np.mean([getattr(r, name) for r in self.per_image]))

    @property
    def dice(self) -> float:
        return self.mean("dice")

    def summary(self) -> dict:
        totals = {k: sum(getattr(r.counts, k) for r in self.per_image) for k in ("tp", "tn", "fp", "fn")}
        return {"id": "mean", **totals, **{k: self.mean(k) for k in METRIC_NAMES}}

    def write_csv(self, path) -> None:
        cols = ["id", "tp", "tn", "fp", "fn", *METRIC_NAMES]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.per_image:
                w.writerow(_fmt(r.row()))
            w.writerow(_fmt(self.summary()))

    def to_json(self) -> dict:
        return {
            "averaging": "macro (mean of per-image values)",
            "aggregate": self.summary(),
            "per_image": [{**r.row(), "empty_convention": r.empty_convention} for r in self.per_image],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _fmt(row: dict) -> dict:
    return {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()}


def evaluate_masks(pairs) -> AggregateReport:
    """``pairs``: iterable of (id, predicted binary mask, truth mask)."""
    return AggregateReport([metrics(confusion(m, y), sid) for sid, m, y in pairs])

