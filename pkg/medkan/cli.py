"""Command-line interface: train, eval, gradcheck, bench, gradcam and make-synth."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .bench import run_bench, write_bench_csv
from .checkpoint import Checkpoint, load_checkpoint, restore_model
from .config import MedKANConfig, RunConfig, load_run_config
from .datasets import DatasetSplit, denormalize, load_npz_dataset, prepare_split, save_npz_dataset, synth_blobs
from .errors import ConfigError, DataError, MedKANError
from .gradcam import gradcam, write_f32, write_overlay_ppm, write_ppm
from .gradcheck import DEFAULT_REPEATS, run_gradcheck
from .metrics import evaluate_logits
from .model import count_parameters
from .npy import serialize_npy
from .settings import MIN_BENCH_ITERS, MIN_BENCH_WARMUP, settings
from .train import predict_logits, train_runs, write_echo
from .variants import build_variant

logger = logging.getLogger(__name__)


def _echo(command: str, resolved: dict[str, object]) -> None:
    """One JSON line on stderr with everything the command resolved."""
    print(f"config {json.dumps({'command': command, **resolved}, sort_keys=True)}", file=sys.stderr)


def _int_list(text: str) -> list[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def _load_splits(path: str | None) -> dict[str, DatasetSplit]:
    if not path:
        raise DataError("No dataset given; pass --data or set 'data' in the config")
    return load_npz_dataset(path)


def _fit_geometry(cfg: MedKANConfig, splits: dict[str, DatasetSplit]) -> dict[str, DatasetSplit]:
    sample = next(iter(splits.values()))
    channels = sample.image_shape[0]
    if sample.num_classes != cfg.num_classes:
        raise ConfigError(
            f"Model has {cfg.num_classes} classes but the dataset has {sample.num_classes}"
        )
    if channels != cfg.in_channels:
        raise ConfigError(f"Model expects {cfg.in_channels} channels, dataset images have {channels}")
    return {name: prepare_split(split, cfg.input_size) for name, split in splits.items()}


def _resolve_run_config(args: argparse.Namespace) -> tuple[RunConfig, dict[str, DatasetSplit]]:
    run_cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.data:
        run_cfg.data = args.data
    if args.out:
        run_cfg.out_dir = args.out
    if args.runs is not None:
        run_cfg.runs = args.runs
    if args.seed is not None:
        run_cfg.train.seed = args.seed

    splits = _load_splits(run_cfg.data)
    sample = next(iter(splits.values()))
    channels, height, _ = sample.image_shape
    if not args.config:
        run_cfg.model.num_classes = sample.num_classes
        run_cfg.model.in_channels = channels
        if height % run_cfg.model.stem_stride == 0:
            run_cfg.model.input_size = height
    if run_cfg.variant:
        run_cfg.model = build_variant(
            run_cfg.variant,
            input_size=run_cfg.model.input_size,
            num_classes=run_cfg.model.num_classes,
            in_channels=run_cfg.model.in_channels,
        )
    run_cfg.validate()
    return run_cfg, _fit_geometry(run_cfg.model, splits)


def cmd_train(args: argparse.Namespace) -> int:
    run_cfg, splits = _resolve_run_config(args)
    out_dir = Path(run_cfg.out_dir)
    _echo("train", {**run_cfg.to_dict(), "threads": T.get_num_threads()})
    write_echo(out_dir / "config.echo.json", run_cfg)
    logger.info("Training startet: %d Parameter, Ausgabe nach %s", count_parameters(run_cfg.model), out_dir)
    results = train_runs(run_cfg, splits, out_dir)
    best = [r.best_record for r in results]
    print(json.dumps({
        "out_dir": str(out_dir),
        "runs": len(results),
        "best_val_acc": [b.val_acc for b in best],
        "best_epoch": [b.epoch for b in best],
    }))
    logger.info("Training abgeschlossen.")
    return 0


def _checkpoint_and_split(args: argparse.Namespace) -> tuple[Checkpoint, DatasetSplit]:
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    ckpt = load_checkpoint(args.ckpt)
    splits = _fit_geometry(ckpt.config, _load_splits(args.data))
    return ckpt, splits[args.split]


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt, split = _checkpoint_and_split(args)
    _echo("eval", {"ckpt": args.ckpt, "data": args.data, "split": args.split, "threads": T.get_num_threads(),
                   "model": ckpt.config.to_dict()})
    model = restore_model(ckpt)
    logits = predict_logits(model, split)
    report = evaluate_logits(logits, split.labels, split.num_classes)
    if args.dump_logits:
        path = Path(args.dump_logits)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize_npy(logits.astype(np.float64)))
        logger.info("Logits gespeichert: %s", path)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed or 0
    _echo("gradcheck", {"seed": seed, "repeats": args.repeats, "threads": T.get_num_threads()})
    report = run_gradcheck(seed=seed, repeats=args.repeats)
    for kind, worst in report.worst_by_kind().items():
        status = "ok" if worst.rel_error < report.tolerance else "FAIL"
        print(f"{kind:<12} {worst.rel_error:.3e} {status} ({worst.case}: {worst.tensor})")
    for failure in report.failures():
        logger.error("Gradientenprüfung fehlgeschlagen: %s / %s (%.3e)", failure.case, failure.tensor, failure.rel_error)
    report.raise_on_failure()
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    threads = args.bench_threads or sorted({1, args.threads or settings.hardware_threads})
    resolved = {
        "basis_counts": args.basis_counts,
        "widths": args.widths,
        "batches": args.batches,
        "threads": threads,
        "warmup": args.warmup or settings.bench_warmup,
        "iters": args.iters or settings.bench_iters,
    }
    if resolved["warmup"] < MIN_BENCH_WARMUP or resolved["iters"] < MIN_BENCH_ITERS:
        raise ConfigError(
            f"Benchmarks need at least {MIN_BENCH_WARMUP} warmup and {MIN_BENCH_ITERS} measured iterations"
        )
    _echo("bench", resolved)
    rows = run_bench(
        basis_counts=args.basis_counts,
        widths=args.widths,
        batches=args.batches,
        thread_counts=threads,
        warmup=resolved["warmup"],
        iters=resolved["iters"],
        seed=args.seed or 0,
    )
    write_bench_csv(rows, sys.stdout)
    return 0


def cmd_gradcam(args: argparse.Namespace) -> int:
    ckpt, split = _checkpoint_and_split(args)
    if not 0 <= args.index < len(split):
        raise DataError(f"Image index {args.index} outside [0, {len(split)}) of split '{split.name}'")
    out = Path(args.out or Path(settings.runs_dir) / f"gradcam_{split.name}_{args.index}.ppm")
    _echo("gradcam", {"ckpt": args.ckpt, "data": args.data, "split": args.split, "index": args.index,
                      "target_class": args.target_class, "layer": args.layer, "out": str(out)})
    model = restore_model(ckpt)
    result = gradcam(model, split.images[args.index], args.target_class, args.layer)
    write_ppm(out, result.heatmap)
    write_f32(out.with_suffix(".f32"), result.heatmap)
    source = denormalize(split.images[args.index])
    overlay = write_overlay_ppm(out.with_name(f"{out.stem}_overlay.ppm"), result.heatmap, source)
    print(json.dumps({
        "predicted_class": result.predicted_class,
        "target_class": result.target_class,
        "probability": result.probability,
        "layer": result.layer_id,
        "ppm": str(out),
        "overlay": str(overlay),
    }))
    return 0


def cmd_make_synth(args: argparse.Namespace) -> int:
    out = Path(args.out or Path(settings.data_dir) / "synth.npz")
    seed = args.seed or 0
    params = {"num_classes": args.classes, "n_per_class": args.per_class, "height": args.size,
              "width": args.size, "seed": seed, "noise": args.noise, "channels": args.channels}
    _echo("make-synth", {**params, "out": str(out)})
    train, val, test = synth_blobs(**params)
    save_npz_dataset({"train": train, "val": val, "test": test}, out)
    logger.info("Synthetischer Datensatz geschrieben: %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--data", help="NPZ dataset")
    common.add_argument("--ckpt", help="checkpoint file")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--threads", type=int, help="worker threads (default: MEDKAN_THREADS)")
    common.add_argument("--runs", type=int, help="independent training runs")
    common.add_argument("--seed", type=int, help="random seed")

    parser = argparse.ArgumentParser(prog="medkan", description="MedKAN image classification toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model").set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--dump-logits", help="write logits as an NPY file")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS, help="random instances per case")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="RBF vs B-spline throughput sweep")
    p.add_argument("--basis-counts", type=_int_list, default=[4, 8, 16])
    p.add_argument("--widths", type=_int_list, default=[64, 256])
    p.add_argument("--batches", type=_int_list, default=[64, 1024])
    p.add_argument("--bench-threads", type=_int_list, help="thread counts to sweep (default: 1 and max)")
    p.add_argument("--warmup", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmap for one image")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target-class", type=int)
    p.add_argument("--layer", help="stem or stage<i> (default: last stage)")
    p.set_defaults(handler=cmd_gradcam)

    p = sub.add_parser("make-synth", parents=[common], help="write a synthetic blob dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=28)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(handler=cmd_make_synth)
    return parser


def _report_error(exc: MedKANError | Exception, code: int, kind: str) -> None:
    message = str(exc).replace('"', "'").replace("\n", " ")
    print(f'error_code={code} kind={kind} message="{message}"', file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.threads is not None:
            T.set_num_threads(args.threads)
        return args.handler(args)
    except MedKANError as exc:
        logger.debug("Fehler im Befehl %s", args.command, exc_info=True)
        _report_error(exc, exc.exit_code, exc.kind)
        return exc.exit_code
    except Exception as exc:
        logger.exception("Unerwarteter Fehler im Befehl %s", args.command)
        _report_error(exc, MedKANError.exit_code, MedKANError.kind)
        return MedKANError.exit_code


__all__ = ["build_parser", "main"]
