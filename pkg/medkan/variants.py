"""Named model sizes (S/B/L) and the block-type ablation matrix."""
from __future__ import annotations

import dataclasses
import logging
from functools import lru_cache
from typing import NamedTuple

from .config import STEM_STRIDES, MedKANConfig, StageSpec
from .errors import ConfigError
from .model import count_parameters

logger = logging.getLogger(__name__)

BASE_DIMS = (64, 128, 256, 512)
GROUPS = 8
DOWNSAMPLE = (False, True, True, True)
REFERENCE_INPUT = 224
REFERENCE_CLASSES = 11
REFERENCE_CHANNELS = 3

# Width multiplier unit: dims are BASE_DIMS * units / 64, rounded to multiples of 8.
_UNIT = 64


class VariantSpec(NamedTuple):
    lik: tuple[int, int, int, int]
    gik: tuple[int, int, int, int]
    target_params: int


VARIANTS: dict[str, VariantSpec] = {
    "S": VariantSpec((2, 2, 4, 2), (0, 0, 1, 1), 11_500_000),
    "B": VariantSpec((2, 2, 6, 2), (0, 0, 2, 1), 24_600_000),
    "L": VariantSpec((2, 3, 9, 3), (0, 0, 2, 2), 48_000_000),
}


class AblationRow(NamedTuple):
    name: str
    local_block_kind: str
    global_mixer_kind: str


ABLATION_ROWS: tuple[AblationRow, ...] = (
    AblationRow("residual+gik_kan", "ResidualBlock", "KAN"),
    AblationRow("convnext+gik_kan", "ConvNeXtBlock", "KAN"),
    AblationRow("lik_conv+gik_kan", "PlainConv", "KAN"),
    AblationRow("lik_kanconv", "KANConv", "None"),
    AblationRow("lik_kanconv+gik_mlp", "KANConv", "MLP"),
    AblationRow("medkan", "KANConv", "KAN"),
)


def _dims(units: int) -> tuple[int, ...]:
    return tuple(max(GROUPS, round(d * units / _UNIT / GROUPS) * GROUPS) for d in BASE_DIMS)


def _geometry(input_size: int) -> tuple[int, tuple[bool, ...]]:
    """Stem stride and per-stage downsampling that fit ``input_size``.

    The stem takes the largest stride dividing the input; a scheduled
    downsample is skipped once the map side is odd.
    """
    stride = next((s for s in sorted(STEM_STRIDES, reverse=True) if input_size % s == 0), 1)
    size = input_size // stride
    downsample = []
    for scheduled in DOWNSAMPLE:
        down = scheduled and size % 2 == 0
        if down:
            size //= 2
        downsample.append(down)
    return stride, tuple(downsample)


def _variant_config(
    spec: VariantSpec,
    units: int,
    input_size: int,
    num_classes: int,
    in_channels: int,
) -> MedKANConfig:
    stem_stride, downsample = _geometry(input_size)
    stages = [
        StageSpec(num_lik=lik, num_gik=gik, dim=dim, groups=GROUPS, downsample=down)
        for lik, gik, dim, down in zip(spec.lik, spec.gik, _dims(units), downsample)
    ]
    return MedKANConfig(
        input_size=input_size,
        in_channels=in_channels,
        stages=stages,
        num_classes=num_classes,
        stem_stride=stem_stride,
    )


@lru_cache(maxsize=None)
def width_units(name: str) -> int:
    """Smallest-error width multiplier (in 1/64 steps) for the variant's parameter target.

    Counts are monotone in the multiplier, so a bisection finds the first
    width at or above the target; that width and its predecessor are compared.
    """
    spec = _variant_spec(name)

    def count(units: int) -> int:
        cfg = _variant_config(spec, units, REFERENCE_INPUT, REFERENCE_CLASSES, REFERENCE_CHANNELS)
        return count_parameters(cfg)

    lo, hi = 1, 16 * _UNIT
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) >= spec.target_params:
            hi = mid
        else:
            lo = mid + 1
    best = lo
    if lo > 1 and abs(count(lo - 1) - spec.target_params) < abs(count(lo) - spec.target_params):
        best = lo - 1
    logger.debug("Variante %s: Breite %d/64, %d Parameter", name, best, count(best))
    return best


def _variant_spec(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError as exc:
        raise ConfigError(f"Unknown variant '{name}' (expected one of {sorted(VARIANTS)})") from exc


def build_variant(
    name: str,
    input_size: int = REFERENCE_INPUT,
    num_classes: int = REFERENCE_CLASSES,
    in_channels: int = REFERENCE_CHANNELS,
) -> MedKANConfig:
    """MedKAN-S/B/L for the given input geometry; widths are fixed at the reference budget."""
    spec = _variant_spec(name)
    cfg = _variant_config(spec, width_units(name), input_size, num_classes, in_channels)
    return cfg.validate()


def ablation_config(base: MedKANConfig, row: AblationRow | str) -> MedKANConfig:
    """Copy of ``base`` with the local block and global mixer of one ablation row."""
    if isinstance(row, str):
        matches = [r for r in ABLATION_ROWS if r.name == row]
        if not matches:
            raise ConfigError(f"Unknown ablation row '{row}'")
        row = matches[0]
    stages = [dataclasses.replace(stage) for stage in base.stages]
    cfg = dataclasses.replace(
        base,
        stages=stages,
        local_block_kind=row.local_block_kind,
        global_mixer_kind=row.global_mixer_kind,
    )
    return cfg.validate()


__all__ = [
    "ABLATION_ROWS",
    "AblationRow",
    "VARIANTS",
    "VariantSpec",
    "ablation_config",
    "build_variant",
    "width_units",
]
