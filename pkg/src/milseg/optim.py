"""Adam with decoupled weight decay and a step-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor


@dataclass
class LrSchedule:
    """``max(floor, alpha * decay_factor ** (iteration // decay_interval))``."""

    decay_factor: float = 0.9
    decay_interval: int = 20000
    floor: float = 1e-5

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1 or self.decay_interval < 1 or self.floor < 0:
            raise ConfigurationError("invalid learning-rate schedule")

    def rate(self, alpha: float, iteration: int) -> float:
        return max(self.floor, alpha * self.decay_factor ** (iteration // self.decay_interval))


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-6
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.epsilon <= 0:
            raise ConfigurationError("invalid Adam hyperparameters")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")


def step(state: AdamState, params: Mapping[str, Tensor], schedule: LrSchedule | None = None) -> float:
    """One Adam update of every tensor in ``params`` from its ``.grad``; returns the rate used.

    The rate comes from ``schedule`` evaluated at the number of steps taken so
    far, so the first step uses ``alpha`` itself. Weight decay shrinks each
    parameter by ``rate * weight_decay * param`` independently of the moments.
    """
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    lr = schedule.rate(state.alpha, state.t) if schedule is not None else state.alpha
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    # bias corrections folded into the step size
    corr1 = 1 - b1**t
    corr2 = math.sqrt(1 - b2**t)
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise UsageError(f"moment buffer for {name!r} has shape {m.shape}, parameter has {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v) / corr2 + state.epsilon)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    return lr


def zero_grads(params: Mapping[str, Tensor] | list[Tensor]) -> None:
    tensors = params.values() if isinstance(params, Mapping) else params
    for p in tensors:
        p.zero_grad()
