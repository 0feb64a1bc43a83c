"""ROC and precision-recall curves from positive/negative score samples.

Higher scores mean "more positive".  Thresholds are the distinct observed
scores; a sample is called positive when ``score >= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptySet(ValueError):
    pass


@dataclass(frozen=True)
class RocPr:
    auroc: float
    aupr: float
    fpr_at_tpr: float
    level: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def roc_rows(self):
        """(threshold, fpr, tpr) rows; the first row is the empty-prediction point."""
        return [(float(t), float(f), float(r)) for t, f, r in zip(self.thresholds, self.fpr, self.tpr)]

    def pr_rows(self):
        return [(float(t), float(r), float(p))
                for t, r, p in zip(self.thresholds[1:], self.recall[1:], self.precision[1:])]


def roc_pr(scores_pos, scores_neg, level: float = 0.95) -> RocPr:
    """AUROC (trapezoid), AUPR (step-wise average precision) and FPR at ``level`` TPR."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise EmptySet("both score lists must be nonempty")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], is_pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[last] / pos.size]
    fpr = np.r_[0.0, fp[last] / neg.size]
    thresholds = np.r_[np.inf, s[last]]
    auroc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    precision = np.r_[1.0, tp[last] / (tp[last] + fp[last])]
    recall = tpr
    aupr = float(np.sum((recall[1:] - recall[:-1]) * precision[1:]))
    ok = tpr >= level - 1e-12
    fpr_at = float(fpr[ok].min())
    return RocPr(auroc, aupr, fpr_at, level, fpr, tpr, thresholds, precision, recall)
