"""First-order optimisation: Adam and a reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> dict[str, Tensor]:
    """Return new parameter tensors after one bias-corrected Adam update.

    ``state`` is updated in place.  Parameters without a gradient entry are
    passed through untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - update, requires_grad=p.requires_grad, name=p.name)
    return out


@dataclass
class PlateauSchedule:
    """Divide the learning rate by ``factor`` after ``patience`` stale updates.

    An update counts as an improvement when it beats the best metric by more
    than ``threshold`` in relative terms.  ``stop`` turns true on the
    ``max_decreases``-th reduction.
    """

    lr: float = 1e-3
    patience: int = 10
    factor: float = 10.0
    threshold: float = 1e-4
    max_decreases: int = 3
    best: float = math.inf
    stale: int = 0
    decreases: int = 0

    def is_improvement(self, metric: float) -> bool:
        if math.isinf(self.best):
            return True
        return metric < self.best - self.threshold * abs(self.best)


def plateau_update(sched: PlateauSchedule, metric: float) -> tuple[float, bool]:
    if not math.isfinite(metric):
        raise ValueError(f"plateau metric must be finite, got {metric}")
    if sched.is_improvement(metric):
        sched.best = metric
        sched.stale = 0
    else:
        sched.stale += 1
        if sched.stale > sched.patience:
            sched.lr /= sched.factor
            sched.decreases += 1
            sched.stale = 0
    return sched.lr, sched.decreases >= sched.max_decreases
