"""Confusion matrices, macro-averaged metrics and top-k accuracy.

Macro averages divide by the number of classes.  A per-class ratio with
a zero denominator counts as 0 (``zero_division="zero"``) or drops that
class from the average (``zero_division="exclude"``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..core import ClassSet


class LengthMismatch(ValueError):
    pass


class IdOutOfRange(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_set: ClassSet | None = None

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fn - self.fp

    def to_rows(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion(preds, labels, num_classes: int, class_set: ClassSet | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=int).ravel()
    labels = np.asarray(labels, dtype=int).ravel()
    if preds.size != labels.size:
        raise LengthMismatch(f"{preds.size} predictions vs {labels.size} labels")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise IdOutOfRange(f"class id outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, class_set)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n_examples: int
    top1: float | None = None
    top5: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den, zero_division):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    ok = den > 0
    vals = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    if zero_division == "exclude":
        return float(vals[ok].mean()) if ok.any() else 0.0
    return float(vals.mean())


def macro_metrics(cm: ConfusionMatrix, zero_division: str = "zero") -> MetricsReport:
    if zero_division not in ("zero", "exclude"):
        raise ValueError("zero_division must be 'zero' or 'exclude'")
    n = cm.total
    if n == 0:
        raise EmptyMatrix("confusion matrix is empty")
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        macro_precision=_ratio(tp, tp + fp, zero_division),
        macro_recall=_ratio(tp, tp + fn, zero_division),
        macro_f1=_ratio(2 * tp, 2 * tp + fp + fn, zero_division),
        n_examples=n,
    )


def label_ranks(prob_rows, labels) -> np.ndarray:
    """0-based rank of each true label; ties go to the lower class id."""
    p = np.atleast_2d(np.asarray(prob_rows, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    if p.shape[0] != labels.size:
        raise LengthMismatch(f"{p.shape[0]} rows vs {labels.size} labels")
    pt = p[np.arange(labels.size), labels][:, None]
    ids = np.arange(p.shape[1])[None, :]
    ahead = (p > pt) | ((p == pt) & (ids < labels[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(prob_rows, labels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = label_ranks(prob_rows, labels)
    if ranks.size == 0:
        return 0.0
    return float((ranks < k).mean())


def argmax_lowest(prob_rows) -> np.ndarray:
    """Row-wise argmax; numpy already returns the first (lowest id) maximum."""
    return np.argmax(np.atleast_2d(prob_rows), axis=1)


def evaluate_probs(prob_rows, labels, num_classes: int | None = None, class_set: ClassSet | None = None,
                   zero_division: str = "zero") -> tuple[MetricsReport, ConfusionMatrix]:
    p = np.atleast_2d(np.asarray(prob_rows, dtype=np.float64))
    C = num_classes or p.shape[1]
    cm = confusion(argmax_lowest(p), labels, C, class_set)
    m = macro_metrics(cm, zero_division)
    rep = MetricsReport(m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1, m.n_examples,
                        topk_accuracy(p, labels, 1), topk_accuracy(p, labels, 5))
    return rep, cm
