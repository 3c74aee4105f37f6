"""Bias-corrected Adam over named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..ndtensor import Tensor


class NonFiniteGradientError(ArithmeticError):
    pass


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Update every parameter in place from its ``.grad`` (missing grads count
    as zero) and advance the step counter."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)
