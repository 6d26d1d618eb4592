"""Training loop with early stopping, evaluation and the multi-run protocol."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from tqdm import tqdm

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .datasets import DatasetSplit, iterate_batches
from .errors import DataError
from .losses import cross_entropy
from .metrics import EvalReport, evaluate_logits
from .model import MedKAN
from .optim import TrainState, step_model
from .settings import settings
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "val_loss", "val_acc", "val_auc", "seconds")
SUMMARY_HEADER = ("run", "seed", "best_epoch", "best_val_acc", "best_val_auc")

EvaluateFn = Callable[[MedKAN, DatasetSplit], EvalReport]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_auc: float
    seconds: float

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.val_loss),
            repr(self.val_acc),
            repr(self.val_auc),
            f"{self.seconds:.3f}",
        ]


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)

    @property
    def best_record(self) -> EpochRecord:
        return max(self.history, key=lambda r: (r.val_acc, -r.epoch))


def predict_logits(model: MedKAN, split: DatasetSplit, batch_size: int | None = None) -> np.ndarray:
    """Forward the whole split without recording a tape."""
    batch_size = batch_size or settings.eval_batch_size
    dtype = model.head.weight.dtype
    chunks = []
    with T.no_grad():
        for images, _ in iterate_batches(split, batch_size):
            chunks.append(model(Tensor(images, dtype=dtype)).data)
    return np.concatenate(chunks, axis=0)


def evaluate(model: MedKAN, split: DatasetSplit, batch_size: int | None = None) -> EvalReport:
    return evaluate_logits(predict_logits(model, split, batch_size), split.labels, split.num_classes)


def _snapshot(model: MedKAN, state: TrainState | None = None, **extra) -> Checkpoint:
    copied = None
    if state is not None:
        copied = TrainState(
            m={k: v.copy() for k, v in state.m.items()},
            v={k: v.copy() for k, v in state.v.items()},
            **state.scalars(),
        )
    return Checkpoint(config=model.config, tensors=model.state_dict(), train_state=copied, extra=extra)


def train_loop(
    model: MedKAN,
    splits: dict[str, DatasetSplit],
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    state: TrainState | None = None,
    evaluate_fn: EvaluateFn | None = None,
    progress: bool | None = None,
) -> TrainResult:
    """Adam on shuffled mini-batches; stops after ``patience`` epochs without a better val ACC.

    The model ends up holding the best weights; ``result.final`` keeps the
    weights of the last epoch.
    """
    train, val = splits.get("train"), splits.get("val")
    if train is None or val is None or len(train) == 0 or len(val) == 0:
        raise DataError("Training needs non-empty 'train' and 'val' splits")
    evaluate_fn = evaluate_fn or evaluate
    progress = settings.progress_bar if progress is None else progress
    dtype = model.head.weight.dtype

    state = state or TrainState(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    writer = None
    handle = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        handle = metrics_path.open("w", newline="", encoding="utf-8")
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)

    history: list[EpochRecord] = []
    best = _snapshot(model, state, epoch=state.epoch)
    try:
        for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(len(train))
            batches = iterate_batches(train, cfg.batch_size, order=order, prefetch=settings.prefetch)
            if progress:
                batches = tqdm(batches, total=math.ceil(len(train) / cfg.batch_size), desc=f"Epoche {epoch}", leave=False)

            loss_sum = 0.0
            for images, labels in batches:
                model.zero_grad()
                loss = cross_entropy(model(Tensor(images, dtype=dtype)), labels)
                T.backward(loss)
                step_model(model, state, cfg)
                loss_sum += loss.item() * labels.size
                logger.debug("Schritt %d: Verlust %.6f", state.step, loss.item())
            model.zero_grad()

            report = evaluate_fn(model, val)
            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / len(train),
                val_loss=report.loss,
                val_acc=report.acc,
                val_auc=report.auc,
                seconds=time.perf_counter() - started,
            )
            history.append(record)
            if writer is not None:
                writer.writerow(record.row())
                handle.flush()

            state.epoch = epoch
            state.rng_state = rng.bit_generator.state
            if report.acc > state.best_val_acc:
                state.best_val_acc = report.acc
                state.epochs_since_best = 0
                best = _snapshot(model, state, epoch=epoch)
            else:
                state.epochs_since_best += 1
            logger.info(
                "Epoche %d: Trainingsverlust %.4f, Val-ACC %.4f, Val-AUC %.4f (%.1fs)",
                epoch, record.train_loss, record.val_acc, record.val_auc, record.seconds,
            )
            if state.epochs_since_best >= cfg.patience:
                logger.info("Early Stopping nach Epoche %d (beste Val-ACC %.4f)", epoch, state.best_val_acc)
                break
    finally:
        if handle is not None:
            handle.close()

    final = _snapshot(model, state, epoch=state.epoch)
    model.load_state_dict(best.tensors)
    return TrainResult(best=best, final=final, history=history, state=state)


def train_runs(run_cfg: RunConfig, splits: dict[str, DatasetSplit], out_dir: str | Path) -> list[TrainResult]:
    """Train ``run_cfg.runs`` seeds; several runs go to ``run_<r>/`` plus ``summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for run in range(run_cfg.runs):
        seed = run_cfg.train.seed + run
        run_dir = out_dir if run_cfg.runs == 1 else out_dir / f"run_{run}"
        train_cfg = TrainConfig(**{**run_cfg.train.to_dict(), "seed": seed})
        logger.info("Lauf %d/%d (Seed %d) startet", run + 1, run_cfg.runs, seed)
        model = MedKAN(run_cfg.model, dtype=train_cfg.dtype, seed=seed)
        result = train_loop(model, splits, train_cfg, metrics_path=run_dir / "metrics.csv")
        save_checkpoint(run_dir / "best.ckpt", result.best)
        save_checkpoint(run_dir / "final.ckpt", result.final)
        results.append(result)

    if run_cfg.runs > 1:
        write_summary(out_dir / "summary.csv", results, run_cfg.train.seed)
    return results


def write_summary(path: Path, results: list[TrainResult], base_seed: int) -> None:
    accs = np.array([r.best_record.val_acc for r in results])
    aucs = np.array([r.best_record.val_auc for r in results])
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER)
        for run, result in enumerate(results):
            rec = result.best_record
            writer.writerow([run, base_seed + run, rec.epoch, repr(rec.val_acc), repr(rec.val_auc)])
        ddof = 1 if len(results) > 1 else 0
        writer.writerow(["mean", "", "", repr(float(accs.mean())), repr(float(np.nanmean(aucs)))])
        writer.writerow(["sd", "", "", repr(float(accs.std(ddof=ddof))), repr(float(np.nanstd(aucs, ddof=ddof)))])
    logger.info(
        "Zusammenfassung: Val-ACC %.4f ± %.4f über %d Läufe",
        accs.mean(), accs.std(ddof=1 if len(results) > 1 else 0), len(results),
    )


def write_echo(path: Path, run_cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run_cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = [
    "METRICS_HEADER",
    "EpochRecord",
    "TrainResult",
    "evaluate",
    "predict_logits",
    "train_loop",
    "train_runs",
    "write_echo",
    "write_summary",
]
