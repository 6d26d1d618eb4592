"""Run configuration: model, training and run documents parsed strictly from JSON."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Type, TypeVar

from .errors import ConfigError, GeometryError
from .kan import Grid, make_grid
from .settings import settings
from .tensor import DTYPES

logger = logging.getLogger(__name__)

LOCAL_BLOCK_KINDS = ("KANConv", "PlainConv", "ResidualBlock", "ConvNeXtBlock")
GLOBAL_MIXER_KINDS = ("KAN", "MLP", "None")
BASES = ("rbf", "bspline")
STEM_STRIDES = {4: (2, 2), 2: (2, 1), 1: (1, 1)}

C = TypeVar("C")


def _from_dict(cls: Type[C], data: Any, path: str, nested: dict[str, Any] | None = None) -> C:
    """Build dataclass ``cls`` from ``data``; unknown keys are rejected by name."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"Unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = dict(data)
    for key, parse in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = parse(kwargs[key], f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"Invalid {path or 'config'}: {exc}") from exc


@dataclass
class StageSpec:
    num_lik: int = 2
    num_gik: int = 0
    dim: int = 64
    groups: int = 8
    downsample: bool = True

    def validate(self, index: int) -> None:
        if self.dim < 1 or self.groups < 1 or self.dim % self.groups:
            raise GeometryError(
                f"stages[{index}]: dim {self.dim} is not divisible by groups {self.groups}"
            )
        if self.num_lik < 0 or self.num_gik < 0:
            raise ConfigError(f"stages[{index}]: block counts must be >= 0")

    @classmethod
    def from_dict(cls, data: Any, path: str = "stage") -> "StageSpec":
        return _from_dict(cls, data, path)


def _parse_stages(value: Any, path: str) -> list[StageSpec]:
    if not isinstance(value, list):
        raise ConfigError(f"{path} must be a list of stage objects")
    return [StageSpec.from_dict(item, f"{path}[{i}]") for i, item in enumerate(value)]


def _parse_range(value: Any, path: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{path} must be a [lo, hi] pair")
    return float(value[0]), float(value[1])


@dataclass
class MedKANConfig:
    """Architecture description; ``validate`` checks every geometric constraint."""

    input_size: int = 28
    in_channels: int = 1
    stages: list[StageSpec] = field(
        default_factory=lambda: [StageSpec(num_lik=1, num_gik=1, dim=32, groups=4, downsample=False)]
    )
    num_classes: int = 2
    local_block_kind: str = "KANConv"
    global_mixer_kind: str = "KAN"
    gik_residual: bool = True
    gik_layers: int = 1
    kan_base_branch: bool = True
    basis: str = "rbf"
    num_basis: int = 8
    grid_range: tuple[float, float] = (-2.0, 2.0)
    sigma: float | None = None
    spline_degree: int = 3
    stem_stride: int = 2
    sffn_ratio: int = 4

    def __post_init__(self) -> None:
        self.grid_range = tuple(float(v) for v in self.grid_range)  # type: ignore[assignment]

    def validate(self, token_limit: int | None = None) -> "MedKANConfig":
        if not self.stages:
            raise ConfigError("model.stages must contain at least one stage")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError(
                f"in_channels ({self.in_channels}) must be >= 1 and num_classes ({self.num_classes}) >= 2"
            )
        if self.local_block_kind not in LOCAL_BLOCK_KINDS:
            raise ConfigError(f"local_block_kind '{self.local_block_kind}' not in {LOCAL_BLOCK_KINDS}")
        if self.global_mixer_kind not in GLOBAL_MIXER_KINDS:
            raise ConfigError(f"global_mixer_kind '{self.global_mixer_kind}' not in {GLOBAL_MIXER_KINDS}")
        if self.basis not in BASES:
            raise ConfigError(f"basis '{self.basis}' not in {BASES}")
        if self.stem_stride not in STEM_STRIDES:
            raise ConfigError(f"stem_stride must be one of {sorted(STEM_STRIDES)}, got {self.stem_stride}")
        if self.gik_layers < 1 or self.sffn_ratio < 1:
            raise ConfigError("gik_layers and sffn_ratio must be >= 1")
        if self.stages[0].dim % 2:
            raise GeometryError(f"First stage dim {self.stages[0].dim} must be even for the stem")
        for index, stage in enumerate(self.stages):
            stage.validate(index)

        limit = settings.gik_token_limit if token_limit is None else token_limit
        for index, size in enumerate(self.spatial_sizes()):
            stage = self.stages[index]
            tokens = size * size
            if stage.num_gik and self.global_mixer_kind != "None" and tokens > limit:
                raise ConfigError(
                    f"stages[{index}] runs GIK on {tokens} tokens (limit {limit}); "
                    "move GIK blocks to a later, lower-resolution stage"
                )
        self.grid()
        return self

    def spatial_sizes(self) -> list[int]:
        """Feature-map side length inside every stage."""
        if self.input_size < 1 or self.input_size % self.stem_stride:
            raise GeometryError(
                f"input_size {self.input_size} is not divisible by stem stride {self.stem_stride}"
            )
        size = self.input_size // self.stem_stride
        sizes = []
        for index, stage in enumerate(self.stages):
            if stage.downsample:
                if size % 2:
                    raise GeometryError(
                        f"stages[{index}] downsamples an odd {size}x{size} map"
                    )
                size //= 2
            if size < 1:
                raise GeometryError(f"stages[{index}] has an empty feature map")
            sizes.append(size)
        return sizes

    def grid(self) -> Grid:
        return make_grid(self.basis, self.num_basis, self.grid_range, self.sigma, self.spline_degree)

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["grid_range"] = list(self.grid_range)
        return data

    @classmethod
    def from_dict(cls, data: Any, path: str = "model") -> "MedKANConfig":
        return _from_dict(cls, data, path, {"stages": _parse_stages, "grid_range": _parse_range})


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 150
    patience: int = 20
    seed: int = 0
    dtype: str = "f32"

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("train.batch_size, train.patience and train.max_epochs must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {sorted(DTYPES)}, got '{self.dtype}'")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Any, path: str = "train") -> "TrainConfig":
        return _from_dict(cls, data, path)


def _parse_model(value: Any, path: str) -> MedKANConfig:
    return MedKANConfig.from_dict(value, path)


def _parse_train(value: Any, path: str) -> TrainConfig:
    return TrainConfig.from_dict(value, path)


@dataclass
class RunConfig:
    """One JSON document: model + training recipe + where to read and write."""

    model: MedKANConfig = field(default_factory=MedKANConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out_dir: str = settings.runs_dir
    runs: int = 1
    variant: str | None = None

    def validate(self) -> "RunConfig":
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if self.variant is not None and self.variant not in ("S", "B", "L"):
            raise ConfigError(f"variant must be S, B or L, got '{self.variant}'")
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data,
            "out_dir": self.out_dir,
            "runs": self.runs,
            "variant": self.variant,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        return _from_dict(cls, data, "", {"model": _parse_model, "train": _parse_train})


def load_run_config(path: str | Path) -> RunConfig:
    """Read a strict JSON run configuration (no comments, no unknown keys)."""
    file = Path(path)
    try:
        text = file.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {file}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{file}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    logger.debug("Konfiguration geladen: %s", file)
    return RunConfig.from_dict(data)


__all__ = [
    "BASES",
    "GLOBAL_MIXER_KINDS",
    "LOCAL_BLOCK_KINDS",
    "MedKANConfig",
    "RunConfig",
    "StageSpec",
    "TrainConfig",
    "load_run_config",
]
