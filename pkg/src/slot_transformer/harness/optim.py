"""Adam with decoupled weight decay, global-norm clipping and learning-rate schedules."""
from __future__ import annotations

import math

import numpy as np

from ..config import Config


def lr_at(cfg: Config, step: int) -> float:
    """Learning rate for 0-based ``step``: constant, or linear warmup then cosine decay to 0."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min(max(step - cfg.warmup, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                         for g in grads))


def clip_grads(params, max_norm: float) -> tuple[float, float]:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns (norm before, norm after).
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
        return norm, global_norm(grads)
    return norm, norm


class Adam:
    """Adam with weight decay applied directly to the weights (p <- p - lr*wd*p) before the step."""

    def __init__(self, named_params, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-6,
                 weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @classmethod
    def from_config(cls, model, cfg: Config) -> "Adam":
        return cls(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps,
                   cfg.weight_decay)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            m, v = self.m[k], self.v[k]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            if self.weight_decay:
                p.data *= dt(1.0 - lr * self.weight_decay)
            p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
