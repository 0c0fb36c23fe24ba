"""Momentum SGD, Adam and the cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(t: int, T: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at t=0 to 0 at t=T, no restart."""
    if T <= 0:
        raise ValueError(f"cosine_lr: total steps must be positive, got T={T}")
    if not 0 <= t <= T:
        raise ValueError(f"cosine_lr: step {t} outside [0, {T}]")
    if t == T:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


def _require_grads(params, who):
    for i, p in enumerate(params):
        if p.grad is None:
            raise RuntimeError(f"{who}: parameter {p.name or i!r} has no gradient")


class SGD:
    """Heavy-ball SGD; weight decay is added to the gradient before momentum."""

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [None] * len(self.params)
        self.steps = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        _require_grads(self.params, "sgd_step")
        for k, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers[k]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[k] = buf
                g = buf
            p.data -= (lr * g).astype(p.data.dtype, copy=False)
        self.steps += 1

    def zero_grads(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; weight decay enters as an L2 term on the gradient."""

    def __init__(self, params, lr=6e-4, betas=(0.5, 0.999), weight_decay=0.0, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        _require_grads(self.params, "adam_step")
        b1, b2 = self.betas
        self.steps += 1
        c1 = 1 - b1 ** self.steps
        c2 = 1 - b2 ** self.steps
        for k, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grads(self):
        for p in self.params:
            p.grad = None


def sgd_step(params, state: SGD, lr: float) -> None:
    state.step(lr)


def adam_step(params, state: Adam, lr: float) -> None:
    state.step(lr)
