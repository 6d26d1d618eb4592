"""Evaluation metrics: accuracy and macro one-vs-rest ROC AUC."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import special, stats

from .errors import ShapeError, UndefinedMetricError
from .tensor import Tensor


def _as_array(values: Any) -> np.ndarray:
    return values.data if isinstance(values, Tensor) else np.asarray(values)


def accuracy(logits: Any, labels: Any) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    scores = _as_array(logits)
    labels = np.asarray(labels).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ShapeError(f"accuracy: scores {scores.shape} do not match {labels.size} labels")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = stats.rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_macro_ovr(scores: Any, labels: Any) -> float:
    """Mean binary AUC over classes, each class against the rest.

    Classes that are absent from ``labels`` (or make up every label) are
    skipped; if no class is left the AUC is undefined.
    """
    scores = _as_array(scores)
    labels = np.asarray(labels).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ShapeError(f"auc: scores {scores.shape} do not match {labels.size} labels")
    if labels.size < 2:
        raise UndefinedMetricError("AUC needs at least two samples")
    aucs = []
    for c in range(scores.shape[1]):
        positive = labels == c
        if positive.all() or not positive.any():
            continue
        aucs.append(binary_auc(scores[:, c], positive))
    if not aucs:
        raise UndefinedMetricError("AUC is undefined: every label belongs to one class")
    return float(np.mean(aucs))


@dataclass
class EvalReport:
    acc: float
    auc: float
    loss: float
    n: int
    per_class_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        auc = None if math.isnan(self.auc) else self.auc
        return {"acc": self.acc, "auc": auc, "loss": self.loss, "n": self.n}


def evaluate_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> EvalReport:
    """ACC, AUC on softmax scores, and mean cross-entropy for precomputed logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    c = num_classes or logits.shape[1]
    log_probs = special.log_softmax(logits, axis=1)
    loss = float(-log_probs[np.arange(labels.size), labels].mean())
    try:
        auc = auc_macro_ovr(np.exp(log_probs), labels)
    except UndefinedMetricError:
        auc = float("nan")
    counts = np.bincount(labels, minlength=c).tolist()
    return EvalReport(acc=accuracy(logits, labels), auc=auc, loss=loss, n=int(labels.size), per_class_counts=counts)


__all__ = ["EvalReport", "accuracy", "auc_macro_ovr", "binary_auc", "evaluate_logits"]
