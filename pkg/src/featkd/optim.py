"""Minibatch SGD with classical momentum."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Sgd:
    """v <- momentum * v + grad; p <- p - lr * v; grads cleared after the step.

    Updates are in place so that detached views sharing parameter storage
    observe the new values. An optional global-norm clip tames the rare
    gradient spikes that batch-norm backward produces on nearly constant
    columns; clipping rescales the whole gradient vector, never single
    entries, and is off by default.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = None):
        if lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if clip_norm is not None and clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be > 0, got {clip_norm}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise ValueError("sgd step with a missing gradient on a tracked parameter")
            grads.append(p.grad)
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = [g * scale for g in grads]
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
