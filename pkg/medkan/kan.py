"""Basis grids and the Kolmogorov-Arnold layers (KANLinear, KANConv2d)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, GeometryError, ShapeError
from .nn import Module, Parameter
from .tensor import Function, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RBFGrid:
    """Gaussian bumps with ``num_basis`` centers spread uniformly over [lo, hi].

    ``sigma`` defaults to the spacing between neighbouring centers.
    """

    num_basis: int = 8
    lo: float = -2.0
    hi: float = 2.0
    sigma: float | None = None
    kind: str = field(default="rbf", init=False)

    def __post_init__(self) -> None:
        if self.num_basis < 1:
            raise ConfigError(f"RBF grid needs at least one basis function, got {self.num_basis}")
        if self.num_basis == 1:
            if self.lo != self.hi or self.sigma is None:
                raise ConfigError("A single-center RBF grid needs lo == hi and an explicit sigma")
        elif not self.hi > self.lo:
            raise ConfigError(f"RBF grid range [{self.lo}, {self.hi}] is empty")
        if self.sigma is None:
            object.__setattr__(self, "sigma", (self.hi - self.lo) / (self.num_basis - 1))
        if not self.sigma > 0:
            raise ConfigError(f"RBF sigma must be positive, got {self.sigma}")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.num_basis)


@dataclass(frozen=True)
class BSplineGrid:
    """Degree-``degree`` B-splines on uniform knots over [lo, hi].

    ``num_basis = intervals + degree``; the knot vector is extended by
    ``degree`` intervals on either side of the domain.
    """

    num_basis: int = 8
    degree: int = 3
    lo: float = -2.0
    hi: float = 2.0
    kind: str = field(default="bspline", init=False)

    def __post_init__(self) -> None:
        if self.degree < 0:
            raise ConfigError(f"B-spline degree must be >= 0, got {self.degree}")
        if self.num_basis - self.degree < 1:
            raise ConfigError(
                f"B-spline grid with degree {self.degree} needs more than {self.degree} basis functions"
            )
        if not self.hi > self.lo:
            raise ConfigError(f"B-spline grid range [{self.lo}, {self.hi}] is empty")

    @property
    def intervals(self) -> int:
        return self.num_basis - self.degree

    @property
    def knots(self) -> np.ndarray:
        p, g = self.degree, self.intervals
        h = (self.hi - self.lo) / g
        knots = self.lo + np.arange(-p, g + p + 1) * h
        knots[p], knots[p + g] = self.lo, self.hi
        return knots


Grid = Union[RBFGrid, BSplineGrid]


def make_grid(
    basis: str = "rbf",
    num_basis: int = 8,
    grid_range: tuple[float, float] = (-2.0, 2.0),
    sigma: float | None = None,
    degree: int = 3,
) -> Grid:
    lo, hi = grid_range
    if basis == "rbf":
        return RBFGrid(num_basis=num_basis, lo=lo, hi=hi, sigma=sigma)
    if basis == "bspline":
        return BSplineGrid(num_basis=num_basis, degree=degree, lo=lo, hi=hi)
    raise ConfigError(f"Unknown basis '{basis}' (expected 'rbf' or 'bspline')")


# ---------------------------------------------------------------------------
# Basis evaluation kernels: values and d/dx stacked on the last axis
# ---------------------------------------------------------------------------

def _rbf_kernel(x: np.ndarray, grid: RBFGrid) -> np.ndarray:
    centers = grid.centers.astype(x.dtype)
    inv_var = x.dtype.type(1.0 / (grid.sigma * grid.sigma))
    diff = x[..., None] - centers
    values = np.exp(-0.5 * inv_var * diff * diff)
    return np.stack([values, -values * diff * inv_var], axis=-1)


def _bspline_kernel(x: np.ndarray, grid: BSplineGrid) -> np.ndarray:
    p = grid.degree
    knots = grid.knots.astype(x.dtype)
    inside = (x >= grid.lo) & (x <= grid.hi)
    xc = np.clip(x, grid.lo, grid.hi)[..., None]

    basis = ((xc >= knots[:-1]) & (xc < knots[1:])).astype(x.dtype)
    at_right = xc[..., 0] >= grid.hi
    if np.any(at_right):
        basis[at_right] = 0
        basis[at_right, p + grid.intervals - 1] = 1

    lower = basis
    for d in range(1, p + 1):
        lower = basis
        left = (xc - knots[: -d - 1]) / (knots[d:-1] - knots[: -d - 1]) * lower[..., :-1]
        right = (knots[d + 1:] - xc) / (knots[d + 1:] - knots[1:-d]) * lower[..., 1:]
        basis = left + right

    if p == 0:
        deriv = np.zeros_like(basis)
    else:
        deriv = (
            p / (knots[p:-1] - knots[: -p - 1]) * lower[..., :-1]
            - p / (knots[p + 1:] - knots[1:-p]) * lower[..., 1:]
        )
        deriv = deriv * inside[..., None]
    return np.stack([basis, deriv.astype(x.dtype, copy=False)], axis=-1)


def _basis_kernel(x: np.ndarray, grid: Grid) -> np.ndarray:
    flat = x.reshape(-1)
    kernel = _rbf_kernel if isinstance(grid, RBFGrid) else _bspline_kernel
    out = T.parallel_rows(lambda rows: kernel(rows, grid), flat, axis=0)
    return out.reshape(x.shape + (grid.num_basis, 2))


class BasisExpand(Function):
    """x[...] -> phi[..., K]; backward contracts the gradient with d(phi)/dx."""

    op = "basis"

    def forward(self, x, grid):
        both = _basis_kernel(x, grid)
        self.saved["deriv"] = both[..., 1]
        return np.ascontiguousarray(both[..., 0])

    def backward(self, grad):
        return ((grad * self.saved["deriv"]).sum(axis=-1),)


def _evaluate(x: Any, grid: Grid) -> Any:
    if isinstance(x, Tensor):
        return BasisExpand.apply(x, grid=grid)
    array = np.asarray(x)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float64)
    return np.ascontiguousarray(_basis_kernel(array, grid)[..., 0])


def rbf_eval(x: Any, grid: RBFGrid) -> Any:
    """exp(-(x - c_k)^2 / (2 sigma^2)) for every center; tensors stay on the tape."""
    if not isinstance(grid, RBFGrid):
        raise ConfigError(f"rbf_eval needs an RBFGrid, got {type(grid).__name__}")
    return _evaluate(x, grid)


def bspline_eval(x: Any, grid: BSplineGrid) -> Any:
    """Cox-de Boor values, inputs clamped to the grid domain."""
    if not isinstance(grid, BSplineGrid):
        raise ConfigError(f"bspline_eval needs a BSplineGrid, got {type(grid).__name__}")
    return _evaluate(x, grid)


def basis_eval(x: Any, grid: Grid) -> Any:
    return _evaluate(x, grid)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def kan_linear(
    x: Tensor,
    grid: Grid,
    spline_weight: Tensor,
    base_weight: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Functional KANLinear: x (N, in) with spline_weight (out, in, K) -> (N, out)."""
    out_dim, in_dim, k = spline_weight.shape
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"KAN layer expects (N, {in_dim}) input, got {x.shape}")
    if k != grid.num_basis:
        raise ShapeError(f"Spline weight has {k} basis slots, grid has {grid.num_basis}")
    phi = T.reshape(basis_eval(x, grid), (x.shape[0], in_dim * k))
    out = T.matmul(phi, T.transpose(T.reshape(spline_weight, (out_dim, in_dim * k))))
    if base_weight is not None:
        out = out + T.matmul(T.silu(x), T.transpose(base_weight))
    if bias is not None:
        out = T.bias_add(out, bias, axis=1)
    return out


class KANLinear(Module):
    """Each input-output edge carries its own learnable univariate function."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        grid: Grid | None = None,
        bias: bool = True,
        base: bool = True,
        dtype: Any = None,
    ) -> None:
        dtype = T.resolve_dtype(T.get_default_dtype() if dtype is None else dtype)
        self.grid = grid if grid is not None else RBFGrid()
        self.in_dim, self.out_dim = in_dim, out_dim
        k = self.grid.num_basis
        self.spline_weight = Parameter(np.zeros((out_dim, in_dim, k)), dtype=dtype)
        self.base_weight = Parameter(np.zeros((out_dim, in_dim)), dtype=dtype) if base else None
        self.bias = Parameter(np.zeros(out_dim), dtype=dtype) if bias else None

    def _init_own(self, rng):
        _init_kan_weights(rng, self.spline_weight, self.base_weight, self.in_dim, self.grid.num_basis)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        return kan_linear(x, self.grid, self.spline_weight, self.base_weight, self.bias)


class KANConv2d(Module):
    """Convolution whose every kernel tap passes through a learnable activation.

    Channels split into ``groups`` slices; each slice is unfolded with im2col
    and fed through its own block of KAN weights, outputs concatenated.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        pad: int = 0,
        groups: int = 1,
        grid: Grid | None = None,
        bias: bool = False,
        base: bool = True,
        dtype: Any = None,
    ) -> None:
        dtype = T.resolve_dtype(T.get_default_dtype() if dtype is None else dtype)
        if groups < 1 or in_ch % groups or out_ch % groups:
            raise GeometryError(
                f"KANConv2d {in_ch}->{out_ch} channels not divisible by groups={groups}"
            )
        self.grid = grid if grid is not None else RBFGrid()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.pad, self.groups = stride, pad, groups
        taps = (in_ch // groups) * kernel * kernel
        k = self.grid.num_basis
        self.spline_weight = Parameter(np.zeros((out_ch, taps, k)), dtype=dtype)
        self.base_weight = Parameter(np.zeros((out_ch, taps)), dtype=dtype) if base else None
        self.bias = Parameter(np.zeros(out_ch), dtype=dtype) if bias else None

    @property
    def taps(self) -> int:
        return (self.in_ch // self.groups) * self.kernel * self.kernel

    def _init_own(self, rng):
        _init_kan_weights(rng, self.spline_weight, self.base_weight, self.taps, self.grid.num_basis)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"KANConv2d expects N×{self.in_ch}×H×W input, got {x.shape}")
        n, _, h, w = x.shape
        ho = T.conv_output_size(h, self.kernel, self.stride, self.pad)
        wo = T.conv_output_size(w, self.kernel, self.stride, self.pad)
        cin, cout = self.in_ch // self.groups, self.out_ch // self.groups

        outputs = []
        for g in range(self.groups):
            x_g = x if self.groups == 1 else T.slice_axis(x, 1, g * cin, (g + 1) * cin)
            cols = T.im2col(x_g, self.kernel, self.kernel, self.stride, self.pad)
            spline = self.spline_weight
            base = self.base_weight
            if self.groups > 1:
                spline = T.slice_axis(spline, 0, g * cout, (g + 1) * cout)
                base = None if base is None else T.slice_axis(base, 0, g * cout, (g + 1) * cout)
            outputs.append(kan_linear(cols, self.grid, spline, base))

        out = outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=1)
        out = T.transpose(T.reshape(out, (n, ho, wo, self.out_ch)), (0, 3, 1, 2))
        if self.bias is not None:
            out = T.bias_add(out, self.bias, axis=1)
        return out


def _init_kan_weights(
    rng: np.random.Generator,
    spline_weight: Parameter,
    base_weight: Parameter | None,
    fan_in: int,
    num_basis: int,
) -> None:
    spline_std = 0.1 / np.sqrt(fan_in * num_basis)
    spline_weight.data = rng.normal(0.0, spline_std, size=spline_weight.shape).astype(spline_weight.dtype)
    if base_weight is not None:
        base_weight.data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=base_weight.shape).astype(base_weight.dtype)


def param_count(layer: Module) -> int:
    """Exact number of learnable scalars in ``layer`` and its sub-modules."""
    return layer.param_count()


__all__ = [
    "BSplineGrid",
    "BasisExpand",
    "Grid",
    "KANConv2d",
    "KANLinear",
    "RBFGrid",
    "basis_eval",
    "bspline_eval",
    "kan_linear",
    "make_grid",
    "param_count",
    "rbf_eval",
]
