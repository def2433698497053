"""SGD with exponentially decaying step size and scheduled Nesterov momentum."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import Gradients, HtnModel


@dataclass(frozen=True)
class OptimizerState:
    velocity: np.ndarray
    epoch: int = 0
    lr0: float = 0.01
    decay: float = 0.97
    alpha0: float = 0.5
    alphaT: float = 0.9
    T: int = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= self.alphaT < 1.0:
            raise ValueError("need 0 <= alpha0 <= alphaT < 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @classmethod
    def for_model(cls, model: HtnModel, **kw) -> "OptimizerState":
        return cls(np.zeros(model.size), **kw)

    @property
    def lr(self) -> float:
        return self.lr0 * self.decay**self.epoch

    @property
    def momentum(self) -> float:
        if self.T == 1:
            return self.alpha0
        frac = min(self.epoch, self.T - 1) / (self.T - 1)
        return self.alpha0 + (self.alphaT - self.alpha0) * frac

    def next_epoch(self) -> "OptimizerState":
        return replace(self, epoch=self.epoch + 1)


def sgd_update(model: HtnModel, grads: Gradients | np.ndarray, state: OptimizerState) -> tuple[HtnModel, OptimizerState]:
    """One Nesterov step, in the form that only needs the gradient at the
    current point:

        v <- alpha v - lr g
        theta <- theta + alpha v - lr g
    """
    g = grads.flat() if isinstance(grads, Gradients) else np.asarray(grads, dtype=np.float64)
    if g.shape != state.velocity.shape or g.size != model.size:
        raise ValueError("gradient, velocity and model sizes differ")
    lr, alpha = state.lr, state.momentum
    v = alpha * state.velocity - lr * g
    theta = model.flat() + alpha * v - lr * g
    return model.unflat(theta), replace(state, velocity=v)
