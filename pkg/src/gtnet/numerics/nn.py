"""Parameter containers and the small layer vocabulary used by the network."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, batch_norm, dropout, linear, relu


class Parameter(Tensor):
    """A trainable tensor with a dotted name and an SGD momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.momentum_buffer: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Attribute-walking container.

    Parameters, buffers and child modules are discovered from instance
    attributes in assignment order, which fixes the checkpoint order.
    """

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, value in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for path, mod in self.named_modules():
            for key, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{path}.{key}" if path else key), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for key in mod._buffer_names:
                yield (f"{path}.{key}" if path else key), getattr(mod, key)

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(kaiming_uniform(rng, in_dim, (in_dim, out_dim), dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected last dim {self.in_dim}, got {x.shape}")
        return linear(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, dim: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)


class LBR(Module):
    """Linear, batch-norm, ReLU."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.linear = Linear(in_dim, out_dim, rng, dtype=dtype)
        self.bn = BatchNorm(out_dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.linear(x)))
