"""Plain SGD with an optional momentum term and a reduce-on-plateau rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_LR = 0.003


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float = DEFAULT_LR
    momentum: float = 0.0
    factor: float = 0.1
    patience: int = 2
    best: float | None = None
    bad_epochs: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "factor": self.factor,
            "patience": self.patience,
            "best": self.best,
            "bad_epochs": self.bad_epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> OptimizerState:
        return cls(**d)


def sgd_step(net, state: OptimizerState, grads: dict | None = None):
    """``p <- p - lr * g`` (heavy-ball when momentum > 0), in place.

    ``grads`` defaults to the ``.grad`` buffers left by backward. Parameters
    without a gradient are left untouched.
    """
    if grads is None:
        grads = {k: p.grad for k, p in net.params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence: non-finite gradient for parameter {name!r}")
    lr = np.asarray(state.lr, dtype=net.dtype)
    for name, g in grads.items():
        p = net.params[name]
        if state.momentum:
            v = state.velocity.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.velocity[name] = v
            g = v
        p.data -= lr * g
    return net


def plateau_update(state: OptimizerState, metric: float) -> float:
    """Record one epoch's validation metric; returns the (possibly reduced) lr.

    After ``patience`` consecutive epochs without strict improvement over the
    best value, the lr is multiplied by ``factor`` and the counter restarts.
    """
    if not np.isfinite(metric):
        raise ValueError(f"validation metric must be finite, got {metric}")
    if state.best is None or metric < state.best:
        state.best = float(metric)
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr
