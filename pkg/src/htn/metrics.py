"""Classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float | None
    auc: float | None
    confusion: np.ndarray  # [K, K], rows = true class

    def as_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def confusion_matrix(y_true, y_pred, K: int) -> np.ndarray:
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float((y_true == y_pred).mean())


def f1_score(y_true, y_pred, positive: int = 1) -> float:
    """Harmonic mean of precision and recall for ``positive``.

    With no positives in either vector the prediction is perfect and the
    score is 1.0.
    """
    y_true, y_pred = np.asarray(y_true) == positive, np.asarray(y_pred) == positive
    tp = int((y_true & y_pred).sum())
    fp = int((~y_true & y_pred).sum())
    fn = int((y_true & ~y_pred).sum())
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def roc_auc(y_true, scores, positive: int = 1) -> float | None:
    """Mann-Whitney rank statistic; ties count one half. ``None`` when a
    class is missing."""
    y = np.asarray(y_true) == positive
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    order = np.argsort(np.concatenate([pos, neg]), kind="mergesort")
    allv = np.concatenate([pos, neg])[order]
    ranks = np.empty(allv.size)
    i = 0
    while i < allv.size:
        j = i
        while j + 1 < allv.size and allv[j + 1] == allv[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    r = np.empty(allv.size)
    r[order] = ranks
    u = r[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def compute_metrics(y_true, y_pred, pos_scores=None, K: int | None = None) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if K is None:
        K = int(max(y_true.max(initial=0), y_pred.max(initial=0))) + 1
    f1 = auc = None
    if K == 2:
        f1 = f1_score(y_true, y_pred)
        if pos_scores is not None:
            auc = roc_auc(y_true, pos_scores)
    return Metrics(accuracy(y_true, y_pred), f1, auc, confusion_matrix(y_true, y_pred, K))
