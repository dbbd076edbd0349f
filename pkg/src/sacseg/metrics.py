"""Confusion matrices, IoU and pixel accuracy, plus CSV/JSON emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def confusion_matrix(pred, truth, num_classes: int, ignore_class: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predictions; ignored truth pixels are dropped."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions for {truth.size} labels")
    for name, a in (("prediction", pred), ("label", truth)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} ids outside [0, {num_classes})")
    if ignore_class is not None:
        keep = truth != ignore_class
        pred, truth = pred[keep], truth[keep]
    flat = truth.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(flat, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(matrix: np.ndarray, ignore_class: int | None = None):
    """Per-class IoU (NaN for classes absent from both sides) and their mean."""
    m = np.asarray(matrix, dtype=np.float64)
    tp = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    if ignore_class is not None:
        iou[ignore_class] = np.nan
    valid = ~np.isnan(iou)
    miou = float(iou[valid].mean()) if valid.any() else float("nan")
    return iou, miou


def confusion_and_miou(pred, truth, num_classes: int, ignore_class: int | None = None):
    matrix = confusion_matrix(pred, truth, num_classes, ignore_class)
    iou, miou = iou_from_confusion(matrix, ignore_class)
    return matrix, iou, miou


@dataclass
class SegMetrics:
    confusion: np.ndarray
    ignore_class: int | None = 0

    @classmethod
    def empty(cls, num_classes: int, ignore_class: int | None = 0) -> "SegMetrics":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), ignore_class)

    def update(self, pred, truth) -> None:
        self.confusion = self.confusion + confusion_matrix(
            pred, truth, len(self.confusion), self.ignore_class)

    def merge(self, other: "SegMetrics") -> "SegMetrics":
        return SegMetrics(self.confusion + other.confusion, self.ignore_class)

    @property
    def iou(self) -> np.ndarray:
        return iou_from_confusion(self.confusion, self.ignore_class)[0]

    @property
    def miou(self) -> float:
        return iou_from_confusion(self.confusion, self.ignore_class)[1]

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")

    def to_dict(self, class_names: dict[int, str] | None = None) -> dict:
        names = class_names or {c: str(c) for c in range(len(self.confusion))}
        per_class = {names[c]: (None if np.isnan(v) else float(v))
                     for c, v in enumerate(self.iou) if c != self.ignore_class}
        return {"miou": self.miou, "accuracy": self.accuracy, "iou": per_class,
                "confusion": self.confusion.tolist()}


def metrics_header(class_names: dict[int, str], ignore_class: int | None = 0) -> list[str]:
    return ["epoch", "split", "miou", "accuracy"] + [
        f"iou_{name}" for c, name in sorted(class_names.items()) if c != ignore_class]


def metrics_row(epoch: int, split: str, metrics: SegMetrics, class_names: dict[int, str]) -> list:
    def fmt(v):
        return "" if np.isnan(v) else repr(float(v))

    iou = metrics.iou
    return [epoch, split, fmt(metrics.miou), fmt(metrics.accuracy)] + [
        fmt(iou[c]) for c in sorted(class_names) if c != metrics.ignore_class]


class MetricsCSV:
    """Append-only metrics log with a fixed header."""

    def __init__(self, path, class_names: dict[int, str], ignore_class: int | None = 0):
        self.path = Path(path)
        self.class_names = class_names
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(metrics_header(class_names, ignore_class))

    def append(self, epoch: int, split: str, metrics: SegMetrics) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(metrics_row(epoch, split, metrics, self.class_names))


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
