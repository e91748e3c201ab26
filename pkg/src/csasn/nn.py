"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


class Module:
    """Owns parameters (requires_grad leaves), buffers and child modules.

    Names are derived from attribute names in definition order, so the
    enumeration is stable across runs and usable as checkpoint keys.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, RunningStats):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=shape))


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier_uniform(rng, n_in, n_out, (n_in, n_out))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = he_uniform(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel))
        self.bias = param(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.stats = RunningStats(channels, momentum)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.stats, self.gain, self.bias, training=self.training, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)
