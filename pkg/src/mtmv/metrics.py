"""Evaluation metrics: ranking metrics for link prediction, confusion-matrix
metrics for node classification, and the report container serialized by runs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels (e.g. one class)."""


@dataclass
class MetricsReport:
    link: dict | None = None                 # {"ap": float, "auc": float}
    classification: dict | None = None       # {"accuracy", "precision_macro", "f1_macro"}
    reconstruction_mse: float | None = None
    epoch_time_seconds: dict | None = None   # {"mean": float, "std": float}
    extras: dict | None = None               # optional per-view / micro breakdowns

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "link": self.link,
            "classification": self.classification,
            "reconstruction_mse": self.reconstruction_mse,
        }
        if self.extras:
            out.update(self.extras)
        if include_timing:
            out["epoch_time_seconds"] = self.epoch_time_seconds
        return out


def _rank_with_ties(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the average rank of their group."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties at 0.5."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    ranks = _rank_with_ties(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Step-wise AP over descending-score thresholds, ties grouped per threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    ap = 0.0
    prev_recall = 0.0
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += (j - i + 1) - int(y[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def classification_metrics(pred_classes, true_classes, n_classes: int,
                           average: str = "macro") -> tuple[float, float, float]:
    """(accuracy, precision, f1). Empty predicted/actual classes score 0.

    ``average="macro"`` takes the unweighted class mean; ``"micro"`` pools the
    per-class counts (which equals accuracy for single-label problems).
    """
    pred = np.asarray(pred_classes, dtype=np.int64)
    true = np.asarray(true_classes, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    accuracy = float((pred == true).mean())
    if average == "micro":
        return accuracy, accuracy, accuracy
    precisions, f1s = [], []
    for c in range(n_classes):
        tp = int(((pred == c) & (true == c)).sum())
        predicted = int((pred == c).sum())
        actual = int((true == c).sum())
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        f1 = 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        f1s.append(f1)
    return accuracy, float(np.mean(precisions)), float(np.mean(f1s))


def link_metrics(probabilities: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Micro-aggregated (ap, auc) over all flattened (edge, view) cells."""
    p = np.asarray(probabilities, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    return average_precision(p, y), roc_auc(p, y)
