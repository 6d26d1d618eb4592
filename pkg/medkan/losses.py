"""Classification loss."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels.astype(np.int64)] = 1
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N×C logits, got {logits.shape}")
    labels = np.asarray(labels).reshape(-1)
    n, c = logits.shape
    if labels.size != n:
        raise ShapeError(f"{n} logit rows but {labels.size} labels")
    target = Tensor(one_hot(labels, c, dtype=logits.dtype))
    picked = T.sum_(T.mul(T.log_softmax(logits, axis=1), target))
    return T.scale(picked, -1.0 / n)


__all__ = ["cross_entropy", "one_hot"]
