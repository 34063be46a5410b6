"""
Dense f64 tensors with a reverse-mode tape
"""

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12
EXP_CEILING = 700.0
LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
NORM_EPS = 1e-5

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Incompatible tensor shapes or op arguments"""
    pass


class Tensor:
    """Immutable n-dimensional array of f64 values"""

    __slots__ = ("data", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64, copy=True)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar over the catalogue
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


class Tape:
    """Ordered record of executed ops, replayed backwards for adjoints

    A tape is confined to the thread that entered it.
    """

    _local = threading.local()

    def __init__(self):
        self.records: List[Tuple[Tensor, Tuple[Tensor, ...], Backward]] = []
        self._grads: Dict[int, np.ndarray] = {}
        self._keep: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        Tape._local.stack.pop()

    @staticmethod
    def current() -> Optional["Tape"]:
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: Backward) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every recorded tensor"""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: Dict[int, Tensor] = {id(loss): loss}

        for out, inputs, backward in reversed(self.records):
            upstream = grads.get(id(out))
            if upstream is None:
                continue
            for tensor, grad in zip(inputs, backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                    keep[key] = tensor

        self._grads = grads
        self._keep = keep

    def has_grad(self, tensor: Tensor) -> bool:
        """True when tensor took part in the last backward() graph"""
        return self._keep.get(id(tensor)) is tensor

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() target with respect to tensor"""
        grad = self._grads.get(id(tensor))
        if grad is None or self._keep.get(id(tensor)) is not tensor:
            return np.zeros_like(tensor.data)
        return grad


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64), False)


def _result(array: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires_grad)
    if requires_grad:
        tape = Tape.current()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# Element-wise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def masked_mul(a: ArrayLike, mask: ArrayLike) -> Tensor:
    """Element-wise product with a constant mask (no gradient to the mask)"""
    a = as_tensor(a)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    try:
        np.broadcast_shapes(a.shape, m.shape)
    except ValueError:
        raise ShapeError(f"masked_mul: shapes {a.shape} and {m.shape} do not broadcast")
    return _result(a.data * m, (a,), lambda g: (_unbroadcast(g * m, a.shape),))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    # NaN in either input propagates
    pick_a = (a.data >= b.data) | np.isnan(a.data)
    return _result(np.maximum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = (a.data <= b.data) | np.isnan(a.data)
    return _result(np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# Non-linearities

def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _result(a.data * active, (a,), lambda g: (g * active,))


def leaky_relu(a: ArrayLike, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    slope = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * slope,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(np.minimum(a.data, EXP_CEILING))
    live = a.data < EXP_CEILING
    return _result(out, (a,), lambda g: (g * out * live,))


def log(a: ArrayLike) -> Tensor:
    """Natural log with arguments clamped to LOG_FLOOR"""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_FLOOR)
    live = a.data > LOG_FLOOR
    return _result(np.log(clamped), (a,), lambda g: (g * live / clamped,))


def arccos(a: ArrayLike) -> Tensor:
    """arccos with the argument clamped to [-1, 1]"""
    a = as_tensor(a)
    clamped = np.clip(a.data, -1.0, 1.0)
    live = np.abs(a.data) <= 1.0
    slope = -1.0 / np.sqrt(np.maximum(1.0 - clamped * clamped, LOG_FLOOR))
    return _result(np.arccos(clamped), (a,), lambda g: (g * slope * live,))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# Reductions

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def tensor_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tensor_sum(a, axes, keepdims) * (1.0 / max(count, 1))


# Structure

def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}")
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: ArrayLike, first: int, second: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(a, axes)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    ndim = parts[0].ndim
    ax = axis % ndim
    for t in parts[1:]:
        other = [n for i, n in enumerate(t.shape) if i != ax]
        first = [n for i, n in enumerate(parts[0].shape) if i != ax]
        if t.ndim != ndim or other != first:
            raise ShapeError(f"concat: shapes {parts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in parts])[:-1]
    out = np.concatenate([t.data for t in parts], axis=ax)
    return _result(out, parts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in parts], axis=axis)
    ax = axis % out.ndim
    return _result(out, parts, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(parts))))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index], copy=True)
    keys = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def backward(g):
        grad = np.zeros_like(a.data)
        if fancy:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return _result(out, (a,), backward)


# Linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast")
    return _result(np.matmul(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                              _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """NCHW convolution with OIHW weights, zero padding and channel groups"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")

    batch, channels, height, width = x.shape
    out_channels, group_in, kh, kw = weight.shape
    if groups < 1 or channels % groups or out_channels % groups:
        raise ShapeError(f"conv2d: groups={groups} does not divide channels {channels} -> {out_channels}")
    if group_in != channels // groups:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape} with groups={groups}")
    if bias is not None and as_tensor(bias).shape != (out_channels,):
        raise ShapeError(f"conv2d: bias shape {as_tensor(bias).shape} does not match {out_channels} channels")

    padded = x.data
    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (padded.shape[2] - kh) // stride + 1
    out_w = (padded.shape[3] - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {padded.shape[2:]}")

    group_out = out_channels // groups
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    windows = windows.reshape(batch, groups, group_in, out_h, out_w, kh, kw)
    kernel = weight.data.reshape(groups, group_out, group_in, kh, kw)

    out = np.einsum("bgcyxij,gocij->bgoyx", windows, kernel, optimize=True)
    out = out.reshape(batch, out_channels, out_h, out_w)
    inputs: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def backward(g):
        grouped = g.reshape(batch, groups, group_out, out_h, out_w)
        grad_w = np.einsum("bgoyx,bgcyxij->gocij", grouped, windows, optimize=True)
        grad_win = np.einsum("bgoyx,gocij->bgcyxij", grouped, kernel, optimize=True)
        grad_win = grad_win.reshape(batch, channels, out_h, out_w, kh, kw)

        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * (out_h - 1) + 1:stride,
                            j:j + stride * (out_w - 1) + 1:stride] += grad_win[..., i, j]
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width] if padding else grad_padded

        grads = (grad_x, grad_w.reshape(weight.shape))
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(out, inputs, backward)


# Normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = NORM_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W)

    Train mode with a single sample falls back to the running statistics.
    Running statistics are updated in place in train mode.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != running_mean.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} does not match {running_mean.shape[0]} channels")

    view = (1, -1, 1, 1)
    if training and x.shape[0] > 1:
        mean = tensor_mean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = tensor_mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        normalized = centered * power(var + eps, -0.5)

        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        shift = running_mean.reshape(view)
        scale = 1.0 / np.sqrt(running_var.reshape(view) + eps)
        normalized = masked_mul(x - shift, scale)

    return normalized * reshape(gamma, view) + reshape(beta, view)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalization over the last axis"""
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: input {x.shape} does not match gamma {gamma.shape}")
    mean = tensor_mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = tensor_mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * gamma + beta


# Attention

def attention(query: Tensor, key: Tensor, value: Tensor) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes

    Returns the attended values and the attention weights.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if query.shape[-1] != key.shape[-1] or key.shape[-2] != value.shape[-2]:
        raise ShapeError(f"attention: query {query.shape}, key {key.shape}, value {value.shape} are incompatible")
    scale = 1.0 / np.sqrt(query.shape[-1])
    logits = matmul(query, swapaxes(key, -1, -2)) * scale
    weights = softmax(logits, axis=-1)
    return matmul(weights, value), weights


OP_SET = (
    "add", "sub", "mul", "div", "neg", "power", "masked_mul", "maximum", "minimum",
    "absolute", "relu", "leaky_relu", "sigmoid", "softplus", "exp", "log", "arccos",
    "softmax", "sum", "mean", "reshape", "transpose", "concat", "stack", "getitem",
    "matmul", "conv2d", "batch_norm", "layer_norm", "attention",
)


def op_set() -> Tuple[str, ...]:
    """Names of the differentiable ops every model in the package is built from"""
    return OP_SET
