"""SGD with momentum and Adam over a :class:`~advlens.models.ParameterSet`."""

from __future__ import annotations

import numpy as np

from .models import is_no_decay


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 no_decay=is_no_decay):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = {k: weight_decay if not no_decay(k) else 0.0 for k in params}
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.decay[k]:
                g = g + self.decay[k] * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def piecewise_lr(base_lr: float, epoch: int, decay_epochs=(15, 18), factor: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based): multiplied by ``factor`` at each decay epoch."""
    return base_lr * factor ** sum(epoch >= e for e in decay_epochs)
