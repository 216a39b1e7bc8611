"""SGD and Adam over named parameter tensors, with an L2 penalty."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, l2: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.l2 = l2

    def step(self) -> None:
        for p in self.params.values():
            g = 0.0 if p.grad is None else p.grad
            # theta <- theta - lr * (grad + 2 * l2 * theta)
            p.data -= self.lr * (g + 2.0 * self.l2 * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Adam(SGD):
    def __init__(self, params, lr: float, l2: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr, l2)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = 2.0 * self.l2 * p.data
            if p.grad is not None:
                g = g + p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def l2_penalty(params: Mapping[str, Tensor]) -> float:
    return float(sum(np.sum(p.data * p.data) for p in params.values()))


def make_optimizer(name: str, params, lr: float, l2: float):
    if name == "sgd":
        return SGD(params, lr, l2)
    if name == "adam":
        return Adam(params, lr, l2)
    raise ValueError(f"unknown optimizer {name!r}")
