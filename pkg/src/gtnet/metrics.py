"""OA / mAcc / IoU from integer confusion counts.

Ratios are formed with :class:`fractions.Fraction` and converted to float only
at the end, so shard-merged and single-pass results agree exactly.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np


class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.array(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or (self.counts < 0).any():
            raise ValueError("confusion counts must be a non-negative k x k matrix")

    def accumulate(self, true_labels, predicted_labels) -> "ConfusionMatrix":
        t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
        p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
        if t.shape != p.shape:
            raise ValueError(f"{t.size} true labels vs {p.size} predictions")
        k = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
            raise ValueError(f"label outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, true_labels, predicted_labels) -> ConfusionMatrix:
    return cm.accumulate(true_labels, predicted_labels)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(Fraction(int(np.trace(cm.counts)), cm.total))


def class_recalls(cm: ConfusionMatrix) -> dict[int, Fraction]:
    rows = cm.counts.sum(axis=1)
    return {i: Fraction(int(cm.counts[i, i]), int(rows[i])) for i in range(cm.num_classes) if rows[i]}


def mean_class_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes that occur in the ground truth."""
    recalls = class_recalls(cm)
    if not recalls:
        raise ValueError("no class is represented in the ground truth")
    return float(sum(recalls.values(), Fraction(0)) / len(recalls))


def class_ious(cm: ConfusionMatrix) -> list[Optional[Fraction]]:
    """Per-class IoU = TP / (TP + FP + FN); None for a class absent from both."""
    out = []
    for i in range(cm.num_classes):
        tp = int(cm.counts[i, i])
        union = int(cm.counts[i].sum() + cm.counts[:, i].sum()) - tp
        out.append(Fraction(tp, union) if union else None)
    return out


def semantic_miou(cm: ConfusionMatrix) -> tuple[list[Optional[float]], float]:
    ious = class_ious(cm)
    present = [x for x in ious if x is not None]
    if not present:
        raise ValueError("empty confusion matrix")
    return [None if x is None else float(x) for x in ious], float(sum(present, Fraction(0)) / len(present))


def shape_iou(true_labels, predicted_labels, parts: Sequence[int]) -> Fraction:
    """Mean part IoU for one shape; a part absent from both sides scores 1."""
    t = np.asarray(true_labels).reshape(-1)
    p = np.asarray(predicted_labels).reshape(-1)
    if t.size == 0:
        raise ValueError("empty shape")
    total = Fraction(0)
    for part in parts:
        inter = int(np.sum((t == part) & (p == part)))
        union = int(np.sum((t == part) | (p == part)))
        total += Fraction(inter, union) if union else Fraction(1)
    return total / len(parts)


class PartIoUAccumulator:
    """Streams shapes; category IoU = mean over its shapes, instance mIoU =
    mean over all shapes."""

    def __init__(self, category_parts: Sequence[Sequence[int]]):
        self.category_parts = [list(p) for p in category_parts]
        self.shape_ious: dict[int, list[Fraction]] = {}

    def add(self, category: int, true_labels, predicted_labels) -> Fraction:
        if not 0 <= category < len(self.category_parts):
            raise ValueError(f"unknown category {category}")
        iou = shape_iou(true_labels, predicted_labels, self.category_parts[category])
        self.shape_ious.setdefault(category, []).append(iou)
        return iou

    def merge(self, other: "PartIoUAccumulator") -> "PartIoUAccumulator":
        out = PartIoUAccumulator(self.category_parts)
        for src in (self, other):
            for c, v in src.shape_ious.items():
                out.shape_ious.setdefault(c, []).extend(v)
        return out

    def result(self) -> tuple[dict[int, float], float]:
        if not self.shape_ious:
            raise ValueError("no shapes scored")
        per_cat = {c: float(sum(v, Fraction(0)) / len(v)) for c, v in sorted(self.shape_ious.items())}
        every = [x for v in self.shape_ious.values() for x in v]
        return per_cat, float(sum(every, Fraction(0)) / len(every))


def mean_iou(true_labels, predicted_labels, *, categories=None,
             category_parts: Optional[Sequence[Sequence[int]]] = None,
             num_classes: Optional[int] = None):
    """Part mode (``category_parts`` given): inputs are per-shape label arrays
    and ``categories`` their category ids; returns (per-category IoU, mIoU over
    shapes). Semantic mode (``num_classes`` given): flat labels; returns
    (per-class IoU, mean over present classes)."""
    if category_parts is not None:
        if categories is None:
            raise ValueError("part mode needs the category of every shape")
        acc = PartIoUAccumulator(category_parts)
        for c, t, p in zip(categories, true_labels, predicted_labels):
            acc.add(int(c), t, p)
        return acc.result()
    if num_classes is None:
        raise ValueError("give category_parts (part mode) or num_classes (semantic mode)")
    cm = ConfusionMatrix(num_classes).accumulate(true_labels, predicted_labels)
    if cm.total == 0:
        raise ValueError("empty input")
    return semantic_miou(cm)
