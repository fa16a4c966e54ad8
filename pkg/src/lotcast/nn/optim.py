"""Optimization: AdamW with a cosine learning-rate schedule, and EMA mirrors."""

from __future__ import annotations

import math

import numpy as np

from .layers import Param


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 toward 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """AdamW with decoupled weight decay; lr follows ``cosine_lr`` over ``total_steps``.

    Parameter order is fixed at construction (sorted by id) so that optimizer
    state and update order are deterministic.
    """

    def __init__(self, params: dict[str, Param], base_lr: float = 1e-4,
                 total_steps: int = 1000, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.names = sorted(params)
        self.params = [params[n] for n in self.names]
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.step_count, self.total_steps)

    def step(self) -> float:
        """Apply one update from accumulated grads; returns the lr used."""
        lr = self.lr
        t = self.step_count + 1
        bc1 = 1.0 - self.b1 ** t
        bc2 = 1.0 - self.b2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.t.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                      + self.weight_decay * p.data)
        self.step_count = t
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def ema_update(target: dict[str, Param], source: dict[str, Param], tau: float) -> None:
    """In-place exponential moving average: target <- tau*target + (1-tau)*source.

    The two parameter dicts must share key structure; only array values on
    ``target`` are touched, so no gradients ever reach it.
    """
    if set(target) != set(source):
        raise ValueError("EMA target/source parameter sets differ")
    for name, tp in target.items():
        sp = source[name]
        tp.t.data = tau * tp.data + (1.0 - tau) * sp.data


def copy_params(target: dict[str, Param], source: dict[str, Param]) -> None:
    if set(target) != set(source):
        raise ValueError("parameter sets differ")
    for name, tp in target.items():
        tp.t.data = source[name].data.copy()
