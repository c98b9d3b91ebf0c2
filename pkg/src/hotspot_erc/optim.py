"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: OptimizerState) -> None:
    """In-place update of ``params`` arrays; missing gradients count as zero.

    All gradients are validated before any parameter moves. ``weight_decay``
    (default 0) applies decoupled shrinkage ``p -= lr * wd * p``.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for '{name}', step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first[name], state.second[name] = m, v
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class ScheduleState:
    lr: float
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    threshold: float = 1e-4
    best: float = -np.inf
    wait: int = 0
    history: list = field(default_factory=list)


def plateau_schedule(state: ScheduleState, dev_accuracy: float) -> float:
    """Halve lr (floored at ``min_lr``) after ``patience`` evaluations without an improvement > threshold."""
    state.history.append(float(dev_accuracy))
    if dev_accuracy > state.best + state.threshold:
        state.best = float(dev_accuracy)
        state.wait = 0
        return state.lr
    state.wait += 1
    if state.wait >= state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.wait = 0
    return state.lr
