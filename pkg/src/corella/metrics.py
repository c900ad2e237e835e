"""AUC, LogLoss and accuracy for binary click labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

EPS = 1e-12


@dataclass(frozen=True)
class EvalResult:
    auc: float | None  # None when only one class is present
    logloss: float
    acc: float
    n: int
    positives: int

    def as_dict(self) -> dict:
        return asdict(self)


def _check(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError(f"labels {labels.shape} and scores {scores.shape} must be equal-length 1-D")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return labels.astype(np.int64), scores


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(xs)]))
    ranks_sorted = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty(len(x))
    ranks[order] = ranks_sorted
    return ranks


def auc(labels, scores) -> float | None:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    labels, scores = _check(labels, scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = midranks(scores)
    u = r[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(labels, probs) -> float:
    labels, probs = _check(labels, probs)
    if len(labels) == 0:
        raise ValueError("logloss of an empty set")
    p = np.clip(probs, EPS, 1.0 - EPS)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


def acc(labels, probs, threshold: float = 0.5) -> float:
    labels, probs = _check(labels, probs)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean((probs >= threshold).astype(np.int64) == labels))


def evaluate(labels, probs) -> EvalResult:
    labels, probs = _check(labels, probs)
    return EvalResult(auc=auc(labels, probs), logloss=logloss(labels, probs),
                      acc=acc(labels, probs), n=len(labels), positives=int(labels.sum()))
