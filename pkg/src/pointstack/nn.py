"""Parameter containers and the layers shared by the backbone and heads."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    default_dtype,
    dropout,
    linear,
    relu,
    zero_grads,
)


class Module:
    """Walks its attributes to find parameters, buffers and sub-modules."""

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grads(self) -> None:
        zero_grads(self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine map over the last axis, uniform(+-1/sqrt(fan_in)) init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, dtype=None):
        dtype = dtype or default_dtype()
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_dim, out_dim)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, (1, out_dim)), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=None):
        dtype = dtype or default_dtype()
        self.gamma = Parameter(np.ones((1, channels)), dtype=dtype)
        self.beta = Parameter(np.zeros((1, channels)), dtype=dtype)
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, self.training)


class ConvBNReLU(Module):
    """Shared point-wise MLP layer: linear, batch norm, ReLU."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=None):
        self.fc = Linear(in_dim, out_dim, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm(out_dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.fc(x)))


class ResidualMLP(Module):
    """Two point-wise layers with an identity shortcut: relu(x + bn(fc(relu(bn(fc(x))))))."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=None):
        self.fc1 = Linear(channels, channels, rng, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(channels, dtype=dtype)
        self.fc2 = Linear(channels, channels, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.fc1(x)))
        return relu(self.bn2(self.fc2(h)) + x)


class MLPBlock(Module):
    """Head block: affine transform, batch norm, ReLU and dropout."""

    def __init__(self, in_dim: int, out_dim: int, p: float, rng: np.random.Generator, dtype=None):
        self.fc = Linear(in_dim, out_dim, rng, dtype=dtype)
        self.bn = BatchNorm(out_dim, dtype=dtype)
        self.p = p

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return dropout(relu(self.bn(self.fc(x))), self.p, self.training, rng)
