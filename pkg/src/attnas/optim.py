"""Optimizers and learning-rate schedules.

Weight decay is coupled: it is added to the gradient as an L2 term before the
update, for SGD-momentum and Adam alike. A parameter whose grad is still None
is treated as having a zero gradient (decay still applies).
"""

from __future__ import annotations

import math

import numpy as np

from . import precision
from .errors import ConfigError
from .tensor import Tensor


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _grad(p: Tensor, weight_decay: float) -> np.ndarray:
    g = p.grad if p.grad is not None else np.zeros_like(p.values)
    if weight_decay:
        g = g + weight_decay * p.values
    return g


class SgdMomentum:
    """SGD with a momentum buffer: buf = mu*buf + g; p -= lr*buf."""

    kind = "sgd-momentum"

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.bufs = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self.bufs):
            g = _grad(p, self.weight_decay)
            buf *= self.momentum
            buf += g
            p.values -= self.lr * buf
        self.step_count += 1

    def state_arrays(self) -> dict:
        out = {f"buf{i}": b for i, b in enumerate(self.bufs)}
        out["step"] = np.array([self.step_count], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i in range(len(self.bufs)):
            self.bufs[i][...] = arrays[f"buf{i}"]
        self.step_count = int(arrays["step"][0])


class Adam:
    """Adam with bias-corrected first/second moments."""

    kind = "adam"

    def __init__(
        self,
        params,
        lr: float,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = _grad(p, self.weight_decay)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        out["step"] = np.array([self.step_count], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i in range(len(self.m)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]
        self.step_count = int(arrays["step"][0])


class LrSchedule:
    """Constant or cosine-to-zero learning-rate schedule."""

    def __init__(self, kind: str, base_lr: float, total_steps: int = 1):
        if kind not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule kind {kind!r}")
        if base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {base_lr}")
        if total_steps <= 0:
            raise ConfigError(f"total_steps must be positive, got {total_steps}")
        self.kind = kind
        self.base_lr = float(base_lr)
        self.total_steps = int(total_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a step; cosine runs from base_lr at 0 to 0 at total_steps."""
    if schedule.kind == "constant":
        return schedule.base_lr
    t = min(max(step, 0), schedule.total_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / schedule.total_steps))
