"""Finite-difference verification of every backward rule, layer by layer.

Each registered case builds a small f64 instance, projects its output onto a
fixed random direction and compares tape gradients with central differences
on a sample of entries of every input and weight.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import MedKANConfig, StageSpec
from .errors import ConfigError, GradientCheckError
from .kan import BSplineGrid, KANConv2d, KANLinear, RBFGrid
from .model import GIK, LGCK, SFFN, MedKAN, Stem
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-5
DEFAULT_EPS = 1e-5
# random instances per case
DEFAULT_REPEATS = 10

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


@dataclass(frozen=True)
class GradCheckCase:
    name: str
    kind: str
    build: Builder


@dataclass(frozen=True)
class GradCheckResult:
    case: str
    kind: str
    tensor: str
    rel_error: float


@dataclass
class GradCheckReport:
    results: list[GradCheckResult] = field(default_factory=list)
    tolerance: float = DEFAULT_TOLERANCE

    def worst_by_kind(self) -> dict[str, GradCheckResult]:
        worst: dict[str, GradCheckResult] = {}
        for result in self.results:
            current = worst.get(result.kind)
            if current is None or result.rel_error > current.rel_error:
                worst[result.kind] = result
        return worst

    def failures(self) -> list[GradCheckResult]:
        return [r for r in self.results if not r.rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures()

    def raise_on_failure(self) -> None:
        failed = self.failures()
        if failed:
            first = max(failed, key=lambda r: r.rel_error)
            raise GradientCheckError(
                f"{len(failed)} gradient check(s) failed; worst: {first.case} / {first.tensor} "
                f"rel_error={first.rel_error:.3e}"
            )


CASES: list[GradCheckCase] = []


def register(name: str, kind: str) -> Callable[[Builder], Builder]:
    def decorator(build: Builder) -> Builder:
        CASES.append(GradCheckCase(name, kind, build))
        return build

    return decorator


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _module_case(module: Module, x: Tensor) -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    leaves: dict[str, Tensor] = {"input": x}
    leaves.update(dict(module.named_parameters()))
    return (lambda: module(x)), leaves


def _randomize(module: Module, rng: np.random.Generator, scale: float = 0.3) -> Module:
    """Dense random weights, so no branch hides behind a zero or identity init."""
    for _, param in module.named_parameters():
        param.data = rng.normal(0.0, scale, size=param.shape)
    return module


@register("matmul", "matmul")
def _matmul(rng):
    a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3)
    return (lambda: T.matmul(a, b)), {"a": a, "b": b}


@register("conv2d[stride=2,pad=1,groups=2]", "conv2d")
def _conv(rng):
    x, w, b = _leaf(rng, 2, 4, 6, 6), _leaf(rng, 6, 2, 3, 3), _leaf(rng, 6)
    return (lambda: T.conv2d(x, w, b, stride=2, pad=1, groups=2)), {"x": x, "w": w, "b": b}


@register("elementwise", "elementwise")
def _elementwise(rng):
    x, y = _leaf(rng, 3, 4), _leaf(rng, 3, 4)

    def run() -> Tensor:
        z = T.silu(x) * T.exp(y * 0.5) + T.gelu(x - y)
        z = T.log(T.add_scalar(T.mul(z, z), 1.0))
        return T.softmax(z, axis=1) + T.log_softmax(z, axis=0)

    return run, {"x": x, "y": y}


@register("layer_norm", "layer_norm")
def _layer_norm(rng):
    norm = _randomize(LayerNorm(5), rng)
    return _module_case(norm, _leaf(rng, 2, 5, 3, 3))


@register("KANLinear[rbf]", "KANLinear")
def _kan_linear_rbf(rng):
    layer = _randomize(KANLinear(4, 3, grid=RBFGrid(num_basis=5)), rng)
    return _module_case(layer, _leaf(rng, 6, 4))


@register("KANLinear[bspline]", "KANLinear")
def _kan_linear_bspline(rng):
    layer = _randomize(KANLinear(4, 3, grid=BSplineGrid(num_basis=6, degree=3)), rng)
    return _module_case(layer, _leaf(rng, 6, 4, scale=0.8))


def _kan_conv_case(groups: int, grid) -> Builder:
    def build(rng):
        layer = _randomize(KANConv2d(4, 4, 3, stride=1, pad=1, groups=groups, grid=grid, bias=True), rng)
        return _module_case(layer, _leaf(rng, 1, 4, 5, 5, scale=0.8))

    return build


for _groups in (1, 2, 4):
    register(f"KANConv2d[g={_groups},rbf]", "KANConv2d")(_kan_conv_case(_groups, RBFGrid(num_basis=4)))
register("KANConv2d[g=2,bspline]", "KANConv2d")(_kan_conv_case(2, BSplineGrid(num_basis=5, degree=3)))


@register("LGCK", "LGCK")
def _lgck(rng):
    block = _randomize(LGCK(4, 2, RBFGrid(num_basis=4)), rng)
    return _module_case(block, _leaf(rng, 1, 4, 4, 4))


@register("SFFN", "SFFN")
def _sffn(rng):
    block = _randomize(SFFN(4, ratio=2), rng)
    return _module_case(block, _leaf(rng, 1, 4, 4, 4))


@register("GIK[kan]", "GIK")
def _gik(rng):
    block = _randomize(GIK(3, 3, RBFGrid(num_basis=4), mixer="KAN", layers=2), rng)
    return _module_case(block, _leaf(rng, 2, 3, 3, 3))


@register("GIK[mlp]", "GIK")
def _gik_mlp(rng):
    block = _randomize(GIK(3, 2, RBFGrid(num_basis=4), mixer="MLP"), rng)
    return _module_case(block, _leaf(rng, 2, 3, 2, 2))


@register("stem", "stem")
def _stem(rng):
    stem = _randomize(Stem(2, 4, stride=4), rng)
    return _module_case(stem, _leaf(rng, 1, 2, 8, 8))


@register("head", "head")
def _head(rng):
    norm = _randomize(LayerNorm(6, axis=1), rng)
    linear = _randomize(Linear(6, 3), rng)
    x = _leaf(rng, 2, 6, 2, 2)
    leaves = {"input": x}
    leaves.update({f"norm.{k}": v for k, v in norm.named_parameters()})
    leaves.update({f"linear.{k}": v for k, v in linear.named_parameters()})
    return (lambda: linear(norm(T.mean(x, axis=(2, 3))))), leaves


def toy_config() -> MedKANConfig:
    return MedKANConfig(
        input_size=8,
        in_channels=1,
        stages=[StageSpec(num_lik=1, num_gik=1, dim=4, groups=2, downsample=False)],
        num_classes=3,
        num_basis=4,
        stem_stride=2,
        sffn_ratio=2,
    )


@register("MedKAN[toy]", "model")
def _model(rng):
    model = _randomize(MedKAN(toy_config()), rng)
    return _module_case(model, _leaf(rng, 2, 1, 8, 8))


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_case(
    case: GradCheckCase,
    seed: int = 0,
    samples: int = 6,
    eps: float = DEFAULT_EPS,
) -> list[GradCheckResult]:
    """Compare tape and central-difference gradients for one case."""
    rng = np.random.default_rng(seed)
    with T.default_dtype("f64"):
        forward, leaves = case.build(rng)
        out = forward()
        direction = Tensor(rng.normal(size=out.shape))

        def loss() -> Tensor:
            return T.sum_(T.mul(forward(), direction))

        for tensor in leaves.values():
            tensor.grad = None
        T.backward(loss())

        results = []
        for name, tensor in leaves.items():
            analytic_full = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            picks = rng.choice(tensor.size, size=min(samples, tensor.size), replace=False)
            analytic = analytic_full.reshape(-1)[picks]
            numeric = np.empty_like(analytic)
            flat = tensor.data.reshape(-1)
            with T.no_grad():
                for j, index in enumerate(picks):
                    original = flat[index]
                    flat[index] = original + eps
                    plus = loss().item()
                    flat[index] = original - eps
                    minus = loss().item()
                    flat[index] = original
                    numeric[j] = (plus - minus) / (2 * eps)
            results.append(GradCheckResult(case.name, case.kind, name, _rel_error(analytic, numeric)))
    return results


def run_gradcheck(
    cases: list[GradCheckCase] | None = None,
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
    repeats: int = DEFAULT_REPEATS,
) -> GradCheckReport:
    if repeats < 1:
        raise ConfigError(f"Gradient check needs at least one instance per case, got {repeats}")
    report = GradCheckReport(tolerance=tolerance)
    for case in cases if cases is not None else CASES:
        for repeat in range(repeats):
            results = check_case(case, seed=seed + repeat)
            report.results.extend(results)
            worst = max(r.rel_error for r in results)
            logger.debug("Gradientenprüfung %s (Seed %d): max rel. Fehler %.3e", case.name, seed + repeat, worst)
    return report


__all__ = [
    "CASES",
    "DEFAULT_REPEATS",
    "GradCheckCase",
    "GradCheckReport",
    "GradCheckResult",
    "check_case",
    "register",
    "run_gradcheck",
    "toy_config",
]
