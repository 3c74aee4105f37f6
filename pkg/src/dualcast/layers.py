"""Parameter containers and the linear layer used throughout the model."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .ndtensor import Tensor, matmul, reshape


class Module:
    """Holds named parameters and child modules; names are dotted paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    """y = x W + b over the last axis."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in)
        self.bias = uniform_param(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = matmul(reshape(x, (-1, x.shape[-1])), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return reshape(y, lead + (y.shape[-1],))
