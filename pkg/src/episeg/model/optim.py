"""Adam and the reduce-on-plateau learning-rate rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from ..errors import InputError, NonFiniteGradient


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.99
    beta2: float = 0.99
    learning_rate: float = 0.0005
    epsilon_hat: float = 1e-8
    plateau_patience: int = 5
    lr_halving_factor: float = 0.5

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("beta1 and beta2 must lie in [0, 1)")
        if self.learning_rate < 0:
            raise InputError("learning_rate must be non-negative")
        if self.plateau_patience < 1:
            raise InputError("plateau_patience must be >= 1")
        if not 0 < self.lr_halving_factor <= 1:
            raise InputError("lr_halving_factor must be in (0, 1]")

    @classmethod
    def ihc(cls) -> "OptimizerConfig":
        return cls(plateau_patience=5)

    @classmethod
    def he(cls) -> "OptimizerConfig":
        return cls(plateau_patience=10)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, cfg: OptimizerConfig, lr=None):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not modified.

    ``lr`` overrides ``cfg.learning_rate`` (the scheduler's current value).
    """
    params = np.asarray(params, dtype=float)
    g = np.asarray(grads, dtype=float)
    if g.shape != params.shape or state.m.shape != params.shape:
        raise InputError("parameter, gradient and state shapes differ")
    if state.t < 0:
        raise InputError("step counter must be non-negative")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient at step {state.t + 1}")
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon_hat)
    return new, AdamState(m, v, t)


@dataclass
class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without strict improvement.

    The counter of non-improving epochs resets on every strict decrease below
    the best loss seen so far and after each reduction.
    """

    lr: float
    patience: int
    factor: float = 0.5
    best: float = float("inf")
    bad_epochs: int = 0
    reductions: List[int] = field(default_factory=list)
    epoch: int = 0

    def step(self, loss: float) -> float:
        """Record one epoch's validation loss; return the lr for the next epoch."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
                self.reductions.append(self.epoch)
        return self.lr


def plateau_scheduler(history: Sequence[float], cfg: OptimizerConfig) -> List[float]:
    """Learning rate in effect after each epoch of ``history``.

    ``out[i]`` is the rate used for epoch ``i + 2`` (1-based), i.e. after
    observing the loss of epoch ``i + 1``.
    """
    losses = [float(x) for x in history]
    if not all(np.isfinite(losses)):
        raise InputError("validation losses must be finite")
    s = PlateauScheduler(cfg.learning_rate, cfg.plateau_patience, cfg.lr_halving_factor)
    return [s.step(x) for x in losses]


__all__ = ["AdamState", "OptimizerConfig", "PlateauScheduler", "adam_step", "plateau_scheduler"]
