"""MedKAN network: stem, patch embedding, LIK/GIK stages and the classifier head.

Every block class has a ``count`` classmethod giving its exact parameter
count without allocating weights; :func:`count_parameters` sums them for a
whole configuration.
"""
from __future__ import annotations

import logging
from typing import Any

import numpy as np

from . import tensor as T
from .config import STEM_STRIDES, MedKANConfig, StageSpec
from .errors import ConfigError, GeometryError
from .kan import Grid, KANConv2d, KANLinear
from .nn import Conv2d, LayerNorm, Linear, Module
from .settings import settings
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _conv_count(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _kan_count(cin: int, cout: int, num_basis: int, base: bool, bias: bool) -> int:
    return cout * cin * (num_basis + int(base)) + (cout if bias else 0)


class Stem(Module):
    """Two 3×3 convolutions (in → d/2 → d), each with layer norm and silu."""

    def __init__(self, in_ch: int, dim: int, stride: int = 4, dtype: Any = None) -> None:
        if stride not in STEM_STRIDES:
            raise ConfigError(f"Unsupported stem stride {stride}")
        s1, s2 = STEM_STRIDES[stride]
        self.stride = stride
        self.conv1 = Conv2d(in_ch, dim // 2, 3, stride=s1, pad=1, dtype=dtype)
        self.norm1 = LayerNorm(dim // 2, dtype=dtype)
        self.conv2 = Conv2d(dim // 2, dim, 3, stride=s2, pad=1, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)

    @classmethod
    def count(cls, in_ch: int, dim: int) -> int:
        half = dim // 2
        return _conv_count(in_ch, half, 3) + 2 * half + _conv_count(half, dim, 3) + 2 * dim

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        if h % self.stride or w % self.stride:
            raise GeometryError(f"Stem stride {self.stride} does not divide input {h}x{w}")
        x = T.silu(self.norm1(self.conv1(x)))
        return T.silu(self.norm2(self.conv2(x)))


class PatchEmbed(Module):
    """2×2 stride-2 convolution + layer norm; 1×1 when only the width changes."""

    def __init__(self, in_dim: int, out_dim: int, downsample: bool = True, dtype: Any = None) -> None:
        self.downsample = downsample
        kernel = 2 if downsample else 1
        self.proj = Conv2d(in_dim, out_dim, kernel, stride=kernel, dtype=dtype)
        self.norm = LayerNorm(out_dim, dtype=dtype)

    @classmethod
    def count(cls, in_dim: int, out_dim: int, downsample: bool = True) -> int:
        return _conv_count(in_dim, out_dim, 2 if downsample else 1) + 2 * out_dim

    def forward(self, x: Tensor) -> Tensor:
        if self.downsample and (x.shape[2] % 2 or x.shape[3] % 2):
            raise GeometryError(f"Patch embedding needs even extents, got {x.shape[2]}x{x.shape[3]}")
        return self.norm(self.proj(x))


class LGCK(Module):
    """x + concat_g(ConvKAN(LN(x)_g)): grouped 3×3 KAN convolution with a residual."""

    def __init__(
        self,
        dim: int,
        groups: int,
        grid: Grid,
        base: bool = True,
        plain: bool = False,
        dtype: Any = None,
    ) -> None:
        self.norm = LayerNorm(dim, dtype=dtype)
        if plain:
            self.conv = Conv2d(dim, dim, 3, stride=1, pad=1, groups=groups, dtype=dtype)
        else:
            self.conv = KANConv2d(dim, dim, 3, stride=1, pad=1, groups=groups, grid=grid, base=base, dtype=dtype)

    @classmethod
    def count(cls, dim: int, groups: int, num_basis: int, base: bool = True, plain: bool = False) -> int:
        if plain:
            conv = _conv_count(dim, dim, 3, groups)
        else:
            conv = _kan_count((dim // groups) * 9, dim, num_basis, base, bias=False)
        return 2 * dim + conv

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv(self.norm(x))


class SFFN(Module):
    """x + 1×1(silu(DW3×3(silu(1×1(LN(x)))))) with hidden width ratio·d."""

    def __init__(self, dim: int, ratio: int = 4, dtype: Any = None) -> None:
        hidden = dim * ratio
        self.norm = LayerNorm(dim, dtype=dtype)
        self.expand = Conv2d(dim, hidden, 1, dtype=dtype)
        self.dwconv = Conv2d(hidden, hidden, 3, pad=1, groups=hidden, dtype=dtype)
        self.project = Conv2d(hidden, dim, 1, dtype=dtype)

    @classmethod
    def count(cls, dim: int, ratio: int = 4) -> int:
        hidden = dim * ratio
        return (
            2 * dim
            + _conv_count(dim, hidden, 1)
            + _conv_count(hidden, hidden, 3, groups=hidden)
            + _conv_count(hidden, dim, 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        y = T.silu(self.expand(self.norm(x)))
        y = T.silu(self.dwconv(y))
        return x + self.project(y)


class TokenMLP(Module):
    """Linear(hw→hw) → silu → Linear(hw→hw): the MLP stand-in for a KAN mixer layer."""

    def __init__(self, tokens: int, dtype: Any = None) -> None:
        self.fc1 = Linear(tokens, tokens, dtype=dtype)
        self.fc2 = Linear(tokens, tokens, dtype=dtype)

    @classmethod
    def count(cls, tokens: int) -> int:
        return 2 * (tokens * tokens + tokens)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class GIK(Module):
    """Global token mixing: every channel row of length h·w runs through stacked mixers."""

    def __init__(
        self,
        dim: int,
        size: int,
        grid: Grid,
        mixer: str = "KAN",
        layers: int = 1,
        residual: bool = True,
        base: bool = True,
        token_limit: int | None = None,
        dtype: Any = None,
    ) -> None:
        limit = settings.gik_token_limit if token_limit is None else token_limit
        tokens = size * size
        if tokens > limit:
            raise ConfigError(
                f"GIK over {tokens} tokens exceeds the limit of {limit}; place it in a later stage"
            )
        self.tokens, self.residual = tokens, residual
        self.norm = LayerNorm(dim, dtype=dtype)
        if mixer == "KAN":
            self.mixers = [KANLinear(tokens, tokens, grid=grid, base=base, dtype=dtype) for _ in range(layers)]
        elif mixer == "MLP":
            self.mixers = [TokenMLP(tokens, dtype=dtype) for _ in range(layers)]
        else:
            raise ConfigError(f"Unknown GIK mixer '{mixer}'")

    @classmethod
    def count(cls, dim: int, size: int, num_basis: int, mixer: str, layers: int, base: bool = True) -> int:
        tokens = size * size
        if mixer == "KAN":
            per_layer = _kan_count(tokens, tokens, num_basis, base, bias=True)
        else:
            per_layer = TokenMLP.count(tokens)
        return 2 * dim + layers * per_layer

    def forward(self, x: Tensor) -> Tensor:
        n, d, h, w = x.shape
        if h * w != self.tokens:
            raise GeometryError(f"GIK built for {self.tokens} tokens, got a {h}x{w} map")
        y = T.reshape(self.norm(x), (n * d, h * w))
        for mixer in self.mixers:
            y = mixer(y)
        y = T.reshape(y, (n, d, h, w))
        return x + y if self.residual else y


class ResidualBlock(Module):
    """Basic residual block with layer norm in place of batch norm."""

    def __init__(self, dim: int, dtype: Any = None) -> None:
        self.conv1 = Conv2d(dim, dim, 3, pad=1, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.conv2 = Conv2d(dim, dim, 3, pad=1, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)

    @classmethod
    def count(cls, dim: int) -> int:
        return 2 * (_conv_count(dim, dim, 3) + 2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return T.relu(x + y)


class ConvNeXtBlock(Module):
    """Depthwise 7×7 → LN → 1×1 (4d) → gelu → 1×1 (d), plus the input."""

    def __init__(self, dim: int, dtype: Any = None) -> None:
        self.dwconv = Conv2d(dim, dim, 7, pad=3, groups=dim, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.expand = Conv2d(dim, 4 * dim, 1, dtype=dtype)
        self.project = Conv2d(4 * dim, dim, 1, dtype=dtype)

    @classmethod
    def count(cls, dim: int) -> int:
        return (
            _conv_count(dim, dim, 7, groups=dim)
            + 2 * dim
            + _conv_count(dim, 4 * dim, 1)
            + _conv_count(4 * dim, dim, 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.dwconv(x))
        return x + self.project(T.gelu(self.expand(y)))


class Stage(Module):
    """Optional patch embedding, then LIK pairs, then GIK pairs."""

    def __init__(self, cfg: MedKANConfig, index: int, in_dim: int, size: int, dtype: Any = None) -> None:
        spec = cfg.stages[index]
        grid = cfg.grid()
        self.embed = None
        if spec.downsample or in_dim != spec.dim:
            self.embed = PatchEmbed(in_dim, spec.dim, downsample=spec.downsample, dtype=dtype)

        blocks: list[Module] = []
        for _ in range(spec.num_lik):
            kind = cfg.local_block_kind
            if kind == "ResidualBlock":
                blocks.append(ResidualBlock(spec.dim, dtype=dtype))
            elif kind == "ConvNeXtBlock":
                blocks.append(ConvNeXtBlock(spec.dim, dtype=dtype))
            else:
                blocks.append(
                    LGCK(spec.dim, spec.groups, grid, base=cfg.kan_base_branch, plain=kind == "PlainConv", dtype=dtype)
                )
                blocks.append(SFFN(spec.dim, cfg.sffn_ratio, dtype=dtype))
        for _ in range(spec.num_gik):
            if cfg.global_mixer_kind != "None":
                blocks.append(
                    GIK(
                        spec.dim,
                        size,
                        grid,
                        mixer=cfg.global_mixer_kind,
                        layers=cfg.gik_layers,
                        residual=cfg.gik_residual,
                        base=cfg.kan_base_branch,
                        dtype=dtype,
                    )
                )
            blocks.append(SFFN(spec.dim, cfg.sffn_ratio, dtype=dtype))
        self.blocks = blocks

    @classmethod
    def count(cls, cfg: MedKANConfig, index: int, in_dim: int, size: int) -> int:
        spec: StageSpec = cfg.stages[index]
        total = 0
        if spec.downsample or in_dim != spec.dim:
            total += PatchEmbed.count(in_dim, spec.dim, spec.downsample)
        kind = cfg.local_block_kind
        for _ in range(spec.num_lik):
            if kind == "ResidualBlock":
                total += ResidualBlock.count(spec.dim)
            elif kind == "ConvNeXtBlock":
                total += ConvNeXtBlock.count(spec.dim)
            else:
                total += LGCK.count(spec.dim, spec.groups, cfg.num_basis, cfg.kan_base_branch, kind == "PlainConv")
                total += SFFN.count(spec.dim, cfg.sffn_ratio)
        for _ in range(spec.num_gik):
            if cfg.global_mixer_kind != "None":
                total += GIK.count(
                    spec.dim, size, cfg.num_basis, cfg.global_mixer_kind, cfg.gik_layers, cfg.kan_base_branch
                )
            total += SFFN.count(spec.dim, cfg.sffn_ratio)
        return total

    def forward(self, x: Tensor) -> Tensor:
        if self.embed is not None:
            x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        return x


class MedKAN(Module):
    """The full classifier. Weights start at zero unless ``seed`` is given."""

    def __init__(self, cfg: MedKANConfig, dtype: Any = None, seed: int | None = None) -> None:
        cfg.validate()
        self._cfg = cfg
        sizes = cfg.spatial_sizes()
        self.stem = Stem(cfg.in_channels, cfg.stages[0].dim, cfg.stem_stride, dtype=dtype)
        stages, in_dim = [], cfg.stages[0].dim
        for index, spec in enumerate(cfg.stages):
            stages.append(Stage(cfg, index, in_dim, sizes[index], dtype=dtype))
            in_dim = spec.dim
        self.stages = stages
        self.head_norm = LayerNorm(in_dim, axis=1, dtype=dtype)
        self.head = Linear(in_dim, cfg.num_classes, dtype=dtype)
        if seed is not None:
            self.reset_parameters(np.random.default_rng(seed))
        logger.debug("MedKAN aufgebaut: %d Parameter", self.param_count())

    @property
    def config(self) -> MedKANConfig:
        return self._cfg

    @property
    def layer_ids(self) -> list[str]:
        return ["stem"] + [f"stage{i + 1}" for i in range(len(self.stages))]

    def forward(self, x: Tensor, features: dict[str, Tensor] | None = None) -> Tensor:
        """Logits for ``x``; stage outputs are recorded into ``features`` when given."""
        cfg = self._cfg
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise GeometryError(f"Model expects N×{expected[0]}×{expected[1]}×{expected[2]} input, got {x.shape}")
        x = self.stem(x)
        if features is not None:
            features["stem"] = x
        for index, stage in enumerate(self.stages):
            x = stage(x)
            if features is not None:
                features[f"stage{index + 1}"] = x
        pooled = T.mean(x, axis=(2, 3))
        return self.head(self.head_norm(pooled))


def count_parameters(cfg: MedKANConfig) -> int:
    """Exact learnable-scalar count of ``MedKAN(cfg)`` without building it."""
    sizes = cfg.spatial_sizes()
    first = cfg.stages[0].dim
    total = Stem.count(cfg.in_channels, first)
    in_dim = first
    for index, spec in enumerate(cfg.stages):
        total += Stage.count(cfg, index, in_dim, sizes[index])
        in_dim = spec.dim
    return total + 2 * in_dim + in_dim * cfg.num_classes + cfg.num_classes


def medkan_forward(cfg: MedKANConfig, weights: dict[str, np.ndarray], x: Tensor) -> Tensor:
    """Functional entry point: build the model for ``cfg``, load ``weights``, run ``x``."""
    dtype = next(iter(weights.values())).dtype if weights else None
    model = MedKAN(cfg, dtype=dtype)
    model.load_state_dict(weights)
    return model(x)


__all__ = [
    "ConvNeXtBlock",
    "GIK",
    "LGCK",
    "MedKAN",
    "PatchEmbed",
    "ResidualBlock",
    "SFFN",
    "Stage",
    "Stem",
    "TokenMLP",
    "count_parameters",
    "medkan_forward",
]
