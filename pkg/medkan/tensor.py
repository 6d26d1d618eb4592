"""Dense tensors with a reverse-mode gradient tape.

Every primitive is a :class:`Function` subclass. ``forward`` works on raw
numpy buffers and ``backward`` maps the gradient of the output to one
gradient per input. ``Function.apply`` records the instance as the tape node
of its output whenever an input requires gradients, so the tape is the graph
of ``Function`` objects reachable from a loss. :func:`backward` walks it once
in reverse topological order and then drops it.

Kernels may split their leading rows over a shared thread pool; results are
bit-identical for a fixed thread count.
"""
from __future__ import annotations

import contextlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from scipy import special

from .errors import AutogradError, ConfigError, GeometryError, ShapeError
from .settings import settings

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_FLOAT_DTYPES = tuple(DTYPES.values())

_default_dtype = DTYPES["f32"]
_grad_mode = threading.local()
_worker_mode = threading.local()
_thread_override = threading.local()

_num_threads = settings.threads
_executor: ThreadPoolExecutor | None = None
_executor_size = 0
_executor_lock = threading.Lock()


# ---------------------------------------------------------------------------
# dtype, grad-mode and thread configuration
# ---------------------------------------------------------------------------

def resolve_dtype(dtype: Any) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    resolved = np.dtype(dtype)
    if resolved not in _FLOAT_DTYPES:
        raise ShapeError(f"Unsupported tensor dtype {resolved}; use f32 or f64")
    return resolved


def dtype_name(dtype: Any) -> str:
    resolved = resolve_dtype(dtype)
    return "f64" if resolved == DTYPES["f64"] else "f32"


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype: Any) -> None:
    global _default_dtype
    _default_dtype = resolve_dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def get_num_threads() -> int:
    """Fan-out cap for the calling thread: its ``num_threads`` override or the process default."""
    return getattr(_thread_override, "count", None) or _num_threads


def _check_thread_count(count: int) -> int:
    if count < 1:
        raise ConfigError(f"Thread count must be >= 1, got {count}")
    return int(count)


def set_num_threads(count: int) -> None:
    """Process-wide default; threads inside ``num_threads`` keep their override."""
    global _num_threads
    _num_threads = _check_thread_count(count)


@contextlib.contextmanager
def num_threads(count: int) -> Iterator[None]:
    """Cap the fan-out of kernels called from the current thread only."""
    previous = getattr(_thread_override, "count", None)
    _thread_override.count = _check_thread_count(count)
    try:
        yield
    finally:
        _thread_override.count = previous


def _get_executor(size: int) -> ThreadPoolExecutor:
    """Shared pool with at least ``size`` workers.

    A pool is never shut down: callers still mapping on a smaller one keep
    it alive, and its idle workers exit once it is collected.
    """
    global _executor, _executor_size
    with _executor_lock:
        if _executor is None or _executor_size < size:
            _executor_size = max(size, settings.threads)
            _executor = ThreadPoolExecutor(max_workers=_executor_size, thread_name_prefix="medkan")
        return _executor


def parallel_rows(fn: Callable[[np.ndarray], np.ndarray], array: np.ndarray, axis: int = 0) -> np.ndarray:
    """Apply ``fn`` to contiguous chunks of ``array`` along ``axis`` and re-join them.

    ``fn`` must be row-independent along ``axis`` and return its result with
    the same extent along that axis.
    """
    axis = axis % array.ndim
    rows = array.shape[axis]
    workers = min(get_num_threads(), rows // settings.parallel_min_rows)
    if workers <= 1 or getattr(_worker_mode, "active", False):
        return fn(array)

    bounds = np.linspace(0, rows, workers + 1).astype(int)
    chunks = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * array.ndim
        index[axis] = slice(lo, hi)
        chunks.append(array[tuple(index)])

    def run(chunk: np.ndarray) -> np.ndarray:
        _worker_mode.active = True
        try:
            return fn(chunk)
        finally:
            _worker_mode.active = False

    executor = _get_executor(workers)
    results = list(executor.map(run, chunks))
    return np.concatenate(results, axis=axis)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """The one matrix-product kernel; stacked operands multiply per leading index."""
    return parallel_rows(lambda rows: np.matmul(rows, b), a, axis=a.ndim - 2)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """N-dimensional f32/f64 array with an optional gradient and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 1000.0

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            target = resolve_dtype(dtype)
        elif array.dtype in _FLOAT_DTYPES:
            target = array.dtype
        else:
            target = _default_dtype
        array = np.ascontiguousarray(array, dtype=target)
        if 0 in array.shape:
            raise ShapeError(f"Tensor extents must be >= 1, got shape {array.shape}")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Function | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def node(self) -> "Function | None":
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add_scalar(self, other)

    def __sub__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add_scalar(self, -other)

    def __rsub__(self, other: Any) -> "Tensor":
        return add_scalar(neg(self), other)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return scale(self, other)

    def __truediv__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return NotImplemented
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class Function:
    """A differentiable primitive and, once applied, a node on the tape."""

    op = "function"

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward rule")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward rule")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=track)
        if track:
            result._node = fn
        return result


def _topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, consumers before producers."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if id(parent) not in visited:
                    stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t`` requiring grad."""
    if loss.ndim != 0:
        raise AutogradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise AutogradError("backward() called on a tensor that is not on the tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for tensor in _topological_order(loss):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.requires_grad:
            tensor.grad = np.array(grad, copy=True) if tensor.grad is None else tensor.grad + grad
        node = tensor._node
        if node is None:
            continue
        for parent, parent_grad in zip(node.inputs, node.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        tensor._node = None


# ---------------------------------------------------------------------------
# Elementwise and scalar primitives
# ---------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


class Add(Function):
    op = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class AddScalar(Function):
    op = "add_scalar"

    def forward(self, a, value):
        return a + a.dtype.type(value)

    def backward(self, grad):
        return (grad,)


class Scale(Function):
    op = "scale"

    def forward(self, a, value):
        self.saved["value"] = a.dtype.type(value)
        return a * self.saved["value"]

    def backward(self, grad):
        return (grad * self.saved["value"],)


class Mul(Function):
    op = "mul"

    def forward(self, a, b):
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad):
        return grad * self.saved["b"], grad * self.saved["a"]


class Neg(Function):
    op = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    op = "exp"

    def forward(self, a):
        self.saved["out"] = np.exp(a)
        return self.saved["out"]

    def backward(self, grad):
        return (grad * self.saved["out"],)


class Log(Function):
    op = "log"

    def forward(self, a):
        self.saved["a"] = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.saved["a"],)


class SiLU(Function):
    op = "silu"

    def forward(self, a):
        sig = special.expit(a)
        self.saved["a"], self.saved["sig"] = a, sig
        return a * sig

    def backward(self, grad):
        a, sig = self.saved["a"], self.saved["sig"]
        return (grad * sig * (1 + a * (1 - sig)),)


class ReLU(Function):
    op = "relu"

    def forward(self, a):
        self.saved["mask"] = a > 0
        return np.where(self.saved["mask"], a, a.dtype.type(0))

    def backward(self, grad):
        return (grad * self.saved["mask"],)


class GELU(Function):
    """tanh approximation of the Gaussian error linear unit."""

    op = "gelu"
    _c = np.sqrt(2.0 / np.pi)

    def forward(self, a):
        c = a.dtype.type(self._c)
        k = a.dtype.type(0.044715)
        t = np.tanh(c * (a + k * a**3))
        self.saved["a"], self.saved["t"] = a, t
        return 0.5 * a * (1 + t)

    def backward(self, grad):
        a, t = self.saved["a"], self.saved["t"]
        c = a.dtype.type(self._c)
        k = a.dtype.type(0.044715)
        d = 0.5 * (1 + t) + 0.5 * a * (1 - t * t) * c * (1 + 3 * k * a * a)
        return (grad * d,)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Add.apply(a, b)


def add_scalar(a: Tensor, value: float) -> Tensor:
    return AddScalar.apply(a, value=float(value))


def scale(a: Tensor, value: float) -> Tensor:
    return Scale.apply(a, value=float(value))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return Mul.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def silu(a: Tensor) -> Tensor:
    return SiLU.apply(a)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def gelu(a: Tensor) -> Tensor:
    return GELU.apply(a)


# ---------------------------------------------------------------------------
# Linear algebra, reductions and layout
# ---------------------------------------------------------------------------

class MatMul(Function):
    op = "matmul"

    def forward(self, a, b):
        self.saved["a"], self.saved["b"] = a, b
        return _mm(a, b)

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        return _mm(grad, b.T), _mm(a.T, grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")
    return MatMul.apply(a, b)


class BiasAdd(Function):
    op = "bias_add"

    def forward(self, x, b, axis):
        self.saved["axis"] = axis
        shape = [1] * x.ndim
        shape[axis] = -1
        return x + b.reshape(shape)

    def backward(self, grad):
        axis = self.saved["axis"]
        others = tuple(i for i in range(grad.ndim) if i != axis)
        return grad, grad.sum(axis=others)


def bias_add(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a per-channel vector along ``axis`` (the only broadcast the engine supports)."""
    axis = axis % x.ndim
    if bias.shape != (x.shape[axis],):
        raise ShapeError(f"bias_add: bias shape {bias.shape} does not match axis {axis} of {x.shape}")
    if bias.dtype != x.dtype:
        raise ShapeError(f"bias_add: dtypes {x.dtype} and {bias.dtype} differ")
    return BiasAdd.apply(x, bias, axis=axis)


def _normalize_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"Repeated reduction axes {axis}")
    return axes


class Sum(Function):
    op = "sum"

    def forward(self, a, axes, keepdims):
        self.saved.update(shape=a.shape, axes=axes, keepdims=keepdims)
        return np.asarray(a.sum(axis=axes, keepdims=keepdims))

    def backward(self, grad):
        shape, axes, keepdims = self.saved["shape"], self.saved["axes"], self.saved["keepdims"]
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape).copy(),)


def sum_(a: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axes=_normalize_axes(axis, a.ndim), keepdims=keepdims)


def mean(a: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


class Reshape(Function):
    op = "reshape"

    def forward(self, a, shape):
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved["shape"]),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = int(np.prod([s for s in shape if s != -1]))
    if shape.count(-1) > 1 or (-1 not in shape and known != a.size) or (-1 in shape and a.size % known):
        raise ShapeError(f"Cannot reshape {a.shape} into {shape}")
    return Reshape.apply(a, shape=shape)


class Transpose(Function):
    op = "transpose"

    def forward(self, a, axes):
        self.saved["axes"] = axes
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.saved["axes"])),)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    return Transpose.apply(a, axes=axes)


class Concat(Function):
    op = "concat"

    def forward(self, *arrays, axis):
        self.saved["axis"] = axis
        self.saved["sizes"] = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.saved["sizes"])[:-1]
        return tuple(np.split(grad, cuts, axis=self.saved["axis"]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; the grouped-feature concatenation of LGCK."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        same_rest = t.ndim == first.ndim and all(
            t.shape[i] == first.shape[i] for i in range(first.ndim) if i != axis
        )
        if not same_rest or t.dtype != first.dtype:
            raise ShapeError(f"concat: {t.shape} does not fit {first.shape} along axis {axis}")
    return Concat.apply(*tensors, axis=axis)


class Slice(Function):
    op = "slice"

    def forward(self, a, axis, start, stop):
        self.saved.update(shape=a.shape, axis=axis, start=start, stop=stop)
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, stop)
        return a[tuple(index)]

    def backward(self, grad):
        out = np.zeros(self.saved["shape"], dtype=grad.dtype)
        index = [slice(None)] * out.ndim
        index[self.saved["axis"]] = slice(self.saved["start"], self.saved["stop"])
        out[tuple(index)] = grad
        return (out,)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    return Slice.apply(a, axis=axis, start=start, stop=stop)


# ---------------------------------------------------------------------------
# Softmax family and normalization
# ---------------------------------------------------------------------------

class Softmax(Function):
    op = "softmax"

    def forward(self, a, axis):
        out = special.softmax(a, axis=axis).astype(a.dtype, copy=False)
        self.saved.update(out=out, axis=axis)
        return out

    def backward(self, grad):
        out, axis = self.saved["out"], self.saved["axis"]
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    op = "log_softmax"

    def forward(self, a, axis):
        out = special.log_softmax(a, axis=axis).astype(a.dtype, copy=False)
        self.saved.update(out=out, axis=axis)
        return out

    def backward(self, grad):
        out, axis = self.saved["out"], self.saved["axis"]
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis % a.ndim)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis % a.ndim)


class LayerNorm(Function):
    op = "layer_norm"

    def forward(self, x, gamma, beta, axis, eps):
        shape = [1] * x.ndim
        shape[axis] = -1
        mu = x.mean(axis=axis, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axis, keepdims=True)
        inv_std = 1 / np.sqrt(var + x.dtype.type(eps))
        xhat = centered * inv_std
        self.saved.update(xhat=xhat, inv_std=inv_std, gamma=gamma.reshape(shape), axis=axis)
        return xhat * gamma.reshape(shape) + beta.reshape(shape)

    def backward(self, grad):
        xhat, inv_std = self.saved["xhat"], self.saved["inv_std"]
        gamma, axis = self.saved["gamma"], self.saved["axis"]
        others = tuple(i for i in range(grad.ndim) if i != axis)
        dgamma = (grad * xhat).sum(axis=others)
        dbeta = grad.sum(axis=others)
        dxhat = grad * gamma
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel ``axis`` independently at every other index."""
    axis = axis % x.ndim
    channels = x.shape[axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match {channels} channels")
    return LayerNorm.apply(x, gamma, beta, axis=axis, eps=eps)


# ---------------------------------------------------------------------------
# Convolution via im2col
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1 or pad < 0 or kernel < 1:
        raise GeometryError(f"Invalid convolution geometry kernel={kernel} stride={stride} pad={pad}")
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise GeometryError(
            f"Kernel {kernel} with stride {stride} and pad {pad} does not fit extent {size}"
        )
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape (N*H'*W', C*kh*kw), columns ordered channel-major."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        i_max = i + stride * ho
        for j in range(kw):
            j_max = j + stride * wo
            col[:, :, i, j, :, :] = img[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    col = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_max = i + stride * ho
        for j in range(kw):
            j_max = j + stride * wo
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j, :, :]
    return img[:, :, pad:pad + h, pad:pad + w]


class Im2Col(Function):
    op = "im2col"

    def forward(self, x, kh, kw, stride, pad):
        self.saved.update(shape=x.shape, kh=kh, kw=kw, stride=stride, pad=pad)
        return _im2col(x, kh, kw, stride, pad)

    def backward(self, grad):
        s = self.saved
        return (_col2im(grad, s["shape"], s["kh"], s["kw"], s["stride"], s["pad"]),)


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"im2col expects N×C×H×W input, got {x.shape}")
    return Im2Col.apply(x, kh=kh, kw=kw, stride=stride, pad=pad)


class Conv2d(Function):
    op = "conv2d"

    def forward(self, x, w, stride, pad, groups):
        n, c, h, width = x.shape
        out_ch, _, kh, kw = w.shape
        ho = conv_output_size(h, kh, stride, pad)
        wo = conv_output_size(width, kw, stride, pad)
        cols = _im2col(x, kh, kw, stride, pad)
        rows, taps, per_group = cols.shape[0], cols.shape[1] // groups, out_ch // groups
        cols_g = np.ascontiguousarray(cols.reshape(rows, groups, taps).transpose(1, 0, 2))
        w_g = w.reshape(groups, per_group, taps).transpose(0, 2, 1)
        out = _mm(cols_g, w_g)
        self.saved.update(
            cols_g=cols_g, w_g=w_g, x_shape=x.shape, w_shape=w.shape,
            geometry=(kh, kw, stride, pad), out_shape=(n, ho, wo, out_ch),
        )
        return out.transpose(1, 0, 2).reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad):
        s = self.saved
        cols_g, w_g = s["cols_g"], s["w_g"]
        groups, rows, taps = cols_g.shape
        per_group = w_g.shape[2]
        kh, kw, stride, pad = s["geometry"]
        g = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(rows, groups, per_group).transpose(1, 0, 2)
        dw = _mm(cols_g.transpose(0, 2, 1), g).transpose(0, 2, 1).reshape(s["w_shape"])
        dcols = _mm(g, w_g.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(rows, groups * taps)
        dx = _col2im(dcols, s["x_shape"], kh, kw, stride, pad)
        return dx, dw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation, N×C×H×W → N×O×H'×W'."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    channels, out_ch, per_group_in = x.shape[1], weight.shape[0], weight.shape[1]
    if groups < 1 or channels % groups or out_ch % groups:
        raise GeometryError(
            f"conv2d: channels {channels} -> {out_ch} are not divisible by groups={groups}"
        )
    if per_group_in * groups != channels:
        raise GeometryError(
            f"conv2d: weight expects {per_group_in * groups} input channels, input has {channels}"
        )
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d: dtypes {x.dtype} and {weight.dtype} differ")
    out = Conv2d.apply(x, weight, stride=stride, pad=pad, groups=groups)
    if bias is not None:
        out = bias_add(out, bias, axis=1)
    return out


__all__ = [
    "DTYPES",
    "Function",
    "Tensor",
    "add",
    "add_scalar",
    "backward",
    "bias_add",
    "concat",
    "conv2d",
    "conv_output_size",
    "default_dtype",
    "dtype_name",
    "exp",
    "gelu",
    "get_default_dtype",
    "get_num_threads",
    "im2col",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "num_threads",
    "parallel_rows",
    "relu",
    "reshape",
    "resolve_dtype",
    "scale",
    "set_default_dtype",
    "set_num_threads",
    "silu",
    "slice_axis",
    "softmax",
    "sum_",
    "transpose",
]
