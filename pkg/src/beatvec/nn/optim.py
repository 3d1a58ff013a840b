from __future__ import annotations

import math

import numpy as np

from .layers import Parameter


class DivergedTraining(RuntimeError):
    pass


def unique_parameters(params) -> list[Parameter]:
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


class SGD:
    """Plain gradient descent with global gradient-norm clipping.

    Tied parameters appear once in ``params`` and already hold the sum of
    both uses' gradients, so a single in-place update serves encoder and
    decoder alike.
    """

    def __init__(self, params, lr: float = 0.01, clip_norm: float | None = 5.0):
        self.params = unique_parameters(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params))

    def step(self) -> float:
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise DivergedTraining("non-finite gradient")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p in self.params:
            p.data -= (self.lr * scale) * p.grad
        return norm


def sgd_step(params, grads, learning_rate: float):
    """Functional form: returns ``[w - lr * g]`` without clipping."""
    return [np.asarray(w, dtype=np.float64) - learning_rate * np.asarray(g) for w, g in zip(params, grads)]
