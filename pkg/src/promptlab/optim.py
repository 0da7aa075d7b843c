"""Plain-SGD and AdamW updates over named numpy parameter trees."""

from __future__ import annotations

import numpy as np


class Sgd:
    """Vanilla gradient descent; parameters updated in place."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            self.params[name] -= lr * grad


class AdamW:
    """AdamW with decoupled weight decay; parameters updated in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1_corr = 1.0 - self.beta1**self.t
        b2_corr = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / b1_corr) / (np.sqrt(v / b2_corr) + self.eps)
            self.params[name] -= lr * (update + self.weight_decay * self.params[name])


def make_optimizer(kind: str, params: dict[str, np.ndarray]):
    if kind == "sgd":
        return Sgd(params)
    if kind == "adamw":
        return AdamW(params)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adamw')")
