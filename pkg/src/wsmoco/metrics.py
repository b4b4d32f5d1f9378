"""Classification and regression metrics.

Undefined values (AUCs on single-class input, correlation of a constant
vector) are reported as NaN.
"""

from __future__ import annotations

import math

import numpy as np

UNDEFINED = math.nan


def _curve_points(scores: np.ndarray, labels: np.ndarray):
    """Cumulative (tp, fp) at each distinct threshold, highest score first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    return tps.astype(np.float64), fps.astype(np.float64)


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve; tied scores form one diagonal step (midrank)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    tps, fps = _curve_points(scores, labels)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        return UNDEFINED
    tps, fps = _curve_points(scores, labels)
    precision = tps / (tps + fps)
    recall = np.r_[0.0, tps / n_pos]
    return float(np.sum(np.diff(recall) * precision))


def metrics_classify(scores, labels) -> dict[str, float]:
    """Accuracy (%) at threshold 0.5, ROC-AUC and PR-AUC for POST-probability scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if len(scores) != len(labels) or len(scores) == 0:
        raise ValueError("scores and labels must be non-empty and equal length")
    acc = 100.0 * float(np.mean((scores >= 0.5).astype(np.int64) == labels))
    return {"accuracy": acc, "roc_auc": roc_auc(scores, labels), "pr_auc": pr_auc(scores, labels)}


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2:
        return UNDEFINED
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0:
        return UNDEFINED
    return float(np.dot(da, db) / denom)


def metrics_regress(pred_kg, true_kg) -> dict[str, float]:
    pred = np.asarray(pred_kg, dtype=np.float64)
    true = np.asarray(true_kg, dtype=np.float64)
    if len(pred) != len(true) or len(pred) == 0:
        raise ValueError("predictions and targets must be non-empty and equal length")
    err = pred - true
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err * err))),
        "corrcoef": pearson(pred, true),
    }
