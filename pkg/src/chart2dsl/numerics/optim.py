"""AdamW, cosine annealing and per-tensor gradient clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def scalar_count(self) -> int:
        return sum(m.size for m in self.first_moment.values()) + sum(
            v.size for v in self.second_moment.values())


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` arrays."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.first_moment.get(name)
        if m is not None and m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} != parameter shape {p.shape} for {name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


@dataclass(frozen=True)
class LRSchedule:
    eta_max: float = 1e-4
    eta_min: float = 1e-6
    t_max: int = 50_000

    def __post_init__(self):
        if not (0 < self.eta_min < self.eta_max):
            raise ValueError(f"need 0 < eta_min < eta_max, got {self.eta_min}, {self.eta_max}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be positive, got {self.t_max}")


def cosine_lr(t: int, sched: LRSchedule) -> float:
    if t < 0:
        raise ValueError(f"step index must be non-negative, got {t}")
    if t > sched.t_max:
        log.warning("cosine_lr: step %d beyond t_max=%d, clamped to eta_min", t, sched.t_max)
        return sched.eta_min
    return sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (
        1.0 + math.cos(math.pi * t / sched.t_max))


def clip_gradients(grads: Mapping[str, np.ndarray], c: float = 1.0) -> dict[str, np.ndarray]:
    """Scale each gradient by ``1 / max(1, ||g|| / c)``; returns new arrays."""
    if c <= 0:
        raise ValueError(f"clip threshold must be positive, got {c}")
    out = {}
    for name, g in grads.items():
        norm = float(np.sqrt(np.sum(g * g)))
        out[name] = g / max(1.0, norm / c)
    return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
