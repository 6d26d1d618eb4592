"""Adam with coupled (L2) weight decay and the resumable optimizer state."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .config import TrainConfig
from .errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class TrainState:
    """Moments per parameter name plus the bookkeeping needed to resume training."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val_acc: float = -1.0
    epochs_since_best: int = 0
    seed: int = 0
    rng_state: dict[str, Any] | None = None

    def scalars(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "best_val_acc": self.best_val_acc,
            "epochs_since_best": self.epochs_since_best,
            "seed": self.seed,
            "rng_state": self.rng_state,
        }


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: TrainState,
    cfg: TrainConfig,
) -> None:
    """One in-place Adam update; parameters without a gradient are left untouched."""
    state.step += 1
    t = state.step
    lr, wd = cfg.lr, cfg.weight_decay
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        theta = param.data
        g = grad + wd * theta if wd else grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        elif m.shape != theta.shape:
            raise ShapeError(f"Adam moment for {name} has shape {m.shape}, parameter {theta.shape}")
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        param.data = (theta - lr * m_hat / (np.sqrt(v_hat) + EPS)).astype(theta.dtype, copy=False)
        state.m[name] = m.astype(theta.dtype, copy=False)
        state.v[name] = v.astype(theta.dtype, copy=False)


def step_model(model: Any, state: TrainState, cfg: TrainConfig) -> None:
    params = dict(model.named_parameters())
    adam_step(params, {name: p.grad for name, p in params.items()}, state, cfg)


__all__ = ["BETA1", "BETA2", "EPS", "TrainState", "adam_step", "step_model"]
