"""Confusion-matrix metrics, ROC curves and AUC for binary scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, LengthMismatch, SingleClass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise EmptyInput("no samples")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold=0.5) -> ConfusionMatrix:
    """Tally predictions; a score ``>= threshold`` counts as positive."""
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple = ()

    def to_dict(self):
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "degenerate": list(self.degenerate)}

    def rendered(self, digits=3):
        return {k: f"{getattr(self, k):.{digits}f}" for k in ("accuracy", "precision", "recall", "f1")}


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def prf1(cm: ConfusionMatrix) -> Metrics:
    if cm.total <= 0:
        raise EmptyInput("empty confusion matrix")
    flags = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    # 2PR/(P+R) written on counts to avoid compounding rounding
    f1 = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1", flags)
    return Metrics((cm.tp + cm.tn) / cm.total, precision, recall, f1, tuple(flags))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray = field(repr=False)

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(scores, labels) -> RocCurve:
    """ROC curve with one point per distinct score (tied scores form one step).

    The first point is ``(0, 0)`` at threshold ``+inf``; the curve reaches
    ``(1, 1)`` at the lowest score.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last position of each group of equal scores
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]])


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under ``curve``."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> float:
    return auc(roc(scores, labels))
