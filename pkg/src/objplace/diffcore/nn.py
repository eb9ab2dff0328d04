"""Layers with named, deterministically ordered parameters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Module:
    """Base class: parameters and buffers are discovered from attributes in
    definition order, recursing into sub-modules and lists of sub-modules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk_params(val, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            yield from _walk_buffers(val, f"{prefix}{key}")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            yield from _walk_modules(val)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())



# attributes may hold modules inside (nested) lists or tuples
def _walk_params(val, name: str):
    if isinstance(val, Tensor) and val.requires_grad:
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            if isinstance(item, (Module, list, tuple)):
                yield from _walk_params(item, f"{name}.{i}")


def _walk_buffers(val, name: str):
    if isinstance(val, np.ndarray):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_buffers(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            if isinstance(item, (Module, list, tuple)):
                yield from _walk_buffers(item, f"{name}.{i}")


def _walk_modules(val):
    if isinstance(val, Module):
        yield from val.modules()
    elif isinstance(val, (list, tuple)):
        for item in val:
            yield from _walk_modules(item)

def kaiming_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, rng: Rng, in_features: int, out_features: int, bias: bool = True):
        self.weight = param(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = param(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        rng: Rng,
        in_ch: int,
        out_ch: int,
        k: int = 3,
        stride: int = 1,
        pad: int = 1,
        bias: bool = True,
    ):
        fan_in = in_ch * k * k
        self.weight = param(kaiming_uniform(rng, (out_ch, in_ch, k, k), fan_in))
        self.bias = param(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )


class ConvBNReLU(Module):
    """3x3 conv (no bias, the norm absorbs it) -> batch norm -> ReLU."""

    def __init__(self, rng: Rng, in_ch: int, out_ch: int):
        self.conv = Conv2d(rng, in_ch, out_ch, 3, 1, 1, bias=False)
        self.bn = BatchNorm(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
