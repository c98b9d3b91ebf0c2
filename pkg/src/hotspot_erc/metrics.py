"""Accuracy and class-frequency-weighted F1 from a confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = true class, cols = predicted
    accuracy: float
    f1: np.ndarray
    freq: np.ndarray
    weighted_f1: float

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "f1": self.f1.tolist(),
            "freq": self.freq.tolist(),
            "weighted_f1": self.weighted_f1,
        }


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def metrics(pred, true, num_classes: int | None = None) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError(f"need equal non-empty label vectors, got {pred.shape} and {true.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(), true.max())) + 1
    cm = confusion_matrix(pred, true, num_classes)
    total = int(cm.sum())
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    support = cm.sum(axis=1)

    # F1 = 2tp / (2tp + fp + fn); evaluated as exact rationals so the weighted
    # sum is correctly rounded once.
    f1_exact = [
        Fraction(2 * int(a), 2 * int(a) + int(b) + int(c)) if (2 * a + b + c) else Fraction(0)
        for a, b, c in zip(tp, fp, fn)
    ]
    wf1 = sum((Fraction(int(s), total) * f for s, f in zip(support, f1_exact)), Fraction(0))
    return MetricsReport(
        confusion=cm,
        accuracy=int(tp.sum()) / total,
        f1=np.array([float(f) for f in f1_exact]),
        freq=support / total,
        weighted_f1=float(wf1),
    )
