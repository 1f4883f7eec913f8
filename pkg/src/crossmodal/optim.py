"""Adam and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None] | None,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.  Every gradient is checked before any parameter moves,
    and frozen parameters (``requires_grad`` off) are refused.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    checked = {}
    for name, p in params.items():
        if not p.requires_grad:
            raise ContractError(f"parameter {name!r} is frozen")
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        checked[name] = g
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = checked[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.1
    patience: int = 2
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    def step(self, validation_loss: float) -> float:
        if validation_loss < self.best:
            self.best = validation_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def lr_scheduler_step(state: PlateauScheduler, validation_loss: float, factor: float | None = None,
                      patience: int | None = None) -> float:
    if factor is not None:
        state.factor = factor
    if patience is not None:
        state.patience = patience
    return state.step(validation_loss)
