"""Adam and plain SGD over named parameter tensors."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(ArithmeticError):
    pass


def _check_grads(params: Mapping[str, Tensor]) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")


def schedule_rate(eta: float, T: int) -> float:
    """Constant step size eta / sqrt(T) used by the convergence bound."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return eta / math.sqrt(T)


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = float(lr)
        self.t = 0

    def step(self) -> None:
        _check_grads(self.params)
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad
        self.t += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class Adam:
    """Bias-corrected Adam.

    Parameters are updated in the mapping's insertion order; pass adapter
    parameters before backbone parameters to mirror the adapter-then-backbone
    update order of the training loop.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        _check_grads(self.params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def sgd_step(params: Mapping[str, Tensor], rate: float) -> None:
    SGD(params, rate).step()
