"""ROC/AUC and Dice evaluation."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, DomainError, EvaluationError


def _scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise DomainError("labels must be 0/1")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise EvaluationError("AUC needs at least one positive and one negative label")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve, i.e. the Mann-Whitney U statistic normalised.

    Ties between a positive and a negative count one half.  Computed from
    midranks after a single sort.
    """
    scores, labels = _scored(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # midranks of tied groups, 1-based
    ranks = np.empty(s.size, dtype=np.float64)
    start = 0
    bounds = np.flatnonzero(np.diff(s)) + 1
    for stop in list(bounds) + [s.size]:
        ranks[start:stop] = 0.5 * (start + 1 + stop)
        start = stop
    pos = labels[order] == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    # twice the U statistic is an exact integer, so the division is exact-rounded
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1.0)
    return float(u2 / (2.0 * n_pos * n_neg))


def roc_curve(scores, labels) -> np.ndarray:
    """ROC staircase as an ``(k, 2)`` array of ``(FPR, TPR)`` points.

    One point per distinct score threshold, from ``(0, 0)`` to ``(1, 1)``.
    Tied positives and negatives produce a diagonal segment, so the
    trapezoidal area equals :func:`roc_auc`.
    """
    scores, labels = _scored(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    n_pos, n_neg = tp[-1], fp[-1]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return np.column_stack([fpr, tpr])


def curve_area(points) -> float:
    """Trapezoidal area under a piecewise-linear curve of ``(x, y)`` points."""
    pts = np.asarray(points, dtype=np.float64)
    dx = np.diff(pts[:, 0])
    return float(np.sum(dx * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def dice_score(pred, gt) -> float:
    """Dice overlap ``2|A n B| / (|A| + |B|)`` of two binary masks.

    Two empty masks score 1.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice_score: {pred.shape} vs {gt.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(gt, (0, 1)).all()):
        raise DomainError("dice_score needs binary masks")
    a = pred.astype(bool)
    b = gt.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
