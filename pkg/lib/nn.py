"""
Parameter containers, layers and the AdamW optimizer
"""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from lib.tensor import (
    ShapeError, Tape, Tensor, batch_norm, conv2d, layer_norm, matmul
)


class Parameter(Tensor):
    """Trainable tensor; the optimizer updates its data in place"""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = requires_grad
        self.name = name

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"assign: value shape {value.shape} does not match parameter {self.data.shape}")
        self.data[...] = value


class Module:
    """Base class: walks attributes to find parameters, buffers and children"""

    training: bool = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{key}", item
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                params[full] = child
            else:
                params.update(child.named_parameters(prefix=f"{full}."))
        return params

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        buffers = {f"{prefix}{name}": value for name, value in self.buffers().items()}
        for name, child in self._children():
            if isinstance(child, Module):
                buffers.update(child.named_buffers(prefix=f"{prefix}{name}."))
        return buffers

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state owned directly by this module"""
        return {}

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for param in self.parameters():
            param.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for param in self.parameters():
            param.requires_grad = True
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: np.array(p.data, copy=True) for name, p in self.named_parameters().items()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"State is missing entries: {sorted(missing)[:5]}")
        for name, param in params.items():
            param.assign(state[name])
        for name, buffer in buffers.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != buffer.shape:
                raise ShapeError(f"Buffer {name}: shape {value.shape} does not match {buffer.shape}")
            buffer[...] = value


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map over the last axis: x @ W + b"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        shape = (in_features, out_features)
        self.weight = Parameter(np.zeros(shape) if zero_init else _uniform(rng, shape, in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear: input {x.shape} does not match weight {self.weight.shape}")
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """2D convolution layer (NCHW)"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True,
                 zero_init: bool = False):
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"Conv2d: groups={groups} does not divide channels {in_channels} -> {out_channels}")
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        fan_in = shape[1] * kernel_size * kernel_size
        self.weight = Parameter(np.zeros(shape) if zero_init else _uniform(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    """Batch normalization with running statistics (momentum 0.1, eps 1e-5)"""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class AdamW:
    """Adam with decoupled weight decay and a one-step learning-rate drop"""

    def __init__(self, params: List[Parameter], lr: float, weight_decay: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 decay_step: Optional[int] = None, decay_factor: float = 0.1):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.decay_step = decay_step
        self.decay_factor = decay_factor
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.decay_step is not None and self.step_count >= self.decay_step:
            return self.lr * self.decay_factor
        return self.lr

    def step(self, tape: Tape) -> None:
        """Apply one update from the gradients held by tape"""
        lr = self.current_lr()
        self.step_count += 1
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1 ** self.step_count
        correction2 = 1.0 - beta2 ** self.step_count

        for param, m, v in zip(self.params, self._m, self._v):
            # Parameters outside the loss graph are left untouched
            if not tape.has_grad(param):
                continue
            grad = tape.grad(param)
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            param.data *= 1.0 - lr * self.weight_decay
            param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
