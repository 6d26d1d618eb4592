"""Parameter containers and the plain (non-KAN) layers built on the tensor tape."""
from __future__ import annotations

import logging
from typing import Any, Iterator

import numpy as np

from . import tensor as T
from .errors import GeometryError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data: Any, dtype: Any = None) -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class: parameters and sub-modules are discovered from attributes.

    Attribute insertion order defines the parameter order, so names returned
    by :meth:`named_parameters` are stable for a given constructor.
    """

    training = True

    def forward(self, *args: Any, **kwargs: Any) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Tensor:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(prefix=f"{full}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters; names and shapes must match exactly."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"Parameter {name}: expected shape {param.shape}, got {value.shape}")
            param.data = np.ascontiguousarray(value, dtype=param.dtype)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Draw fresh initial values for this module and all sub-modules."""
        self._init_own(rng)
        for _, value in self._children():
            if isinstance(value, Module):
                value.reset_parameters(rng)

    def _init_own(self, rng: np.random.Generator) -> None:
        """Initialize parameters owned directly by this module (none by default)."""


def _zeros(shape: tuple[int, ...], dtype: Any) -> Parameter:
    return Parameter(np.zeros(shape), dtype=dtype)


def _uniform(rng: np.random.Generator, param: Parameter, bound: float) -> None:
    param.data = rng.uniform(-bound, bound, size=param.shape).astype(param.dtype)


class Linear(Module):
    """y = x @ W + b with W stored as (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, dtype: Any = None) -> None:
        dtype = T.resolve_dtype(T.get_default_dtype() if dtype is None else dtype)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _zeros((in_dim, out_dim), dtype)
        self.bias = _zeros((out_dim,), dtype) if bias else None

    def _init_own(self, rng):
        bound = 1.0 / np.sqrt(self.in_dim)
        _uniform(rng, self.weight, bound)
        if self.bias is not None:
            _uniform(rng, self.bias, bound)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"Linear expects (N, {self.in_dim}) input, got {x.shape}")
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.bias_add(out, self.bias, axis=1)
        return out


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        groups: int = 1,
        bias: bool = True,
        dtype: Any = None,
    ) -> None:
        dtype = T.resolve_dtype(T.get_default_dtype() if dtype is None else dtype)
        if in_ch % groups or out_ch % groups:
            raise GeometryError(f"Conv2d {in_ch}->{out_ch} not divisible by groups={groups}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.pad, self.groups = stride, pad, groups
        self.weight = _zeros((out_ch, in_ch // groups, kernel, kernel), dtype)
        self.bias = _zeros((out_ch,), dtype) if bias else None

    def _init_own(self, rng):
        fan_in = (self.in_ch // self.groups) * self.kernel * self.kernel
        bound = 1.0 / np.sqrt(fan_in)
        _uniform(rng, self.weight, bound)
        if self.bias is not None:
            _uniform(rng, self.bias, bound)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad, groups=self.groups)


class LayerNorm(Module):
    """Channel layer normalization over ``axis`` (axis 1 for N×C×H×W maps)."""

    def __init__(self, channels: int, axis: int = 1, eps: float = 1e-6, dtype: Any = None) -> None:
        dtype = T.resolve_dtype(T.get_default_dtype() if dtype is None else dtype)
        self.channels, self.axis, self.eps = channels, axis, eps
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = _zeros((channels,), dtype)

    def _init_own(self, rng):
        self.weight.data = np.ones(self.channels, dtype=self.weight.dtype)
        self.bias.data = np.zeros(self.channels, dtype=self.bias.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)


__all__ = ["Conv2d", "LayerNorm", "Linear", "Module", "Parameter"]
