"""Throughput sweep: RBF versus degree-3 B-spline KANLinear at equal basis count."""
from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import astuple, dataclass, fields
from itertools import product
from typing import Callable, Iterable, TextIO

import numpy as np

from . import tensor as T
from .kan import BSplineGrid, Grid, KANLinear, RBFGrid
from .settings import settings
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_BASIS_COUNTS = (4, 8, 16)
DEFAULT_WIDTHS = (64, 256)
DEFAULT_BATCHES = (64, 1024)
SPLINE_DEGREE = 3


@dataclass(frozen=True)
class BenchRow:
    basis: str
    num_basis: int
    width: int
    batch: int
    threads: int
    forward_us: float
    fwd_bwd_us: float
    ratio: float
    ratio_fwd_bwd: float


def bench_columns() -> list[str]:
    return [f.name for f in fields(BenchRow)]


def median_us(fn: Callable[[], object], warmup: int, iters: int) -> float:
    """Median wall time of ``fn`` in microseconds on the monotonic clock."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return statistics.median(samples) / 1000.0


def _time_layer(grid: Grid, width: int, batch: int, warmup: int, iters: int, seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    with T.default_dtype("f32"):
        layer = KANLinear(width, width, grid=grid)
        layer.reset_parameters(rng)
        x = Tensor(rng.uniform(-2.0, 2.0, size=(batch, width)).astype(np.float32), requires_grad=True)

    def forward() -> None:
        with T.no_grad():
            layer(x)

    def forward_backward() -> None:
        layer.zero_grad()
        T.backward(T.sum_(layer(x)))

    return median_us(forward, warmup, iters), median_us(forward_backward, warmup, iters)


def run_bench(
    basis_counts: Iterable[int] = DEFAULT_BASIS_COUNTS,
    widths: Iterable[int] = DEFAULT_WIDTHS,
    batches: Iterable[int] = DEFAULT_BATCHES,
    thread_counts: Iterable[int] | None = None,
    warmup: int | None = None,
    iters: int | None = None,
    seed: int = 0,
) -> list[BenchRow]:
    """Every (K, width, batch, threads) case timed for both bases; ratio = RBF / B-spline."""
    warmup = settings.bench_warmup if warmup is None else warmup
    iters = settings.bench_iters if iters is None else iters
    if thread_counts is None:
        thread_counts = sorted({1, settings.hardware_threads})

    rows: list[BenchRow] = []
    for k, width, batch, threads in product(basis_counts, widths, batches, thread_counts):
        with T.num_threads(threads):
            rbf = _time_layer(RBFGrid(num_basis=k), width, batch, warmup, iters, seed)
            spline = _time_layer(BSplineGrid(num_basis=k, degree=SPLINE_DEGREE), width, batch, warmup, iters, seed)
        ratio = rbf[0] / spline[0]
        ratio_fb = rbf[1] / spline[1]
        for name, (fwd, fb) in (("rbf", rbf), ("bspline", spline)):
            rows.append(BenchRow(name, k, width, batch, threads, fwd, fb, ratio, ratio_fb))
        logger.info(
            "K=%d Breite=%d Batch=%d Threads=%d: RBF %.1fµs, B-Spline %.1fµs (Verhältnis %.3f)",
            k, width, batch, threads, rbf[0], spline[0], ratio,
        )
    return rows


def write_bench_csv(rows: list[BenchRow], out: TextIO) -> None:
    writer = csv.writer(out)
    writer.writerow(bench_columns())
    for row in rows:
        writer.writerow(
            [f"{v:.3f}" if isinstance(v, float) else v for v in astuple(row)]
        )


def rbf_faster_share(rows: list[BenchRow]) -> float:
    """Fraction of sweep cases in which the RBF forward pass beat the B-spline one."""
    cases = [r for r in rows if r.basis == "rbf"]
    return sum(r.ratio < 1.0 for r in cases) / len(cases) if cases else 0.0


__all__ = [
    "BenchRow",
    "bench_columns",
    "median_us",
    "rbf_faster_share",
    "run_bench",
    "write_bench_csv",
]
