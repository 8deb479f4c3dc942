"""Heavy-ball SGD with weight decay and a step LR schedule that can be restarted."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ModelParams
from .tensor import DimensionError


@dataclass(frozen=True)
class SgdConfig:
    initial_lr: float = 1e-3
    momentum: float = 0.98
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_every_epochs: int = 7

    def __post_init__(self):
        if self.initial_lr <= 0 or self.decay_factor <= 0 or self.decay_every_epochs <= 0:
            raise ValueError("lr, decay factor and decay period must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight decay nonnegative")

    def lr_at(self, epochs_since_reset: int) -> float:
        return self.initial_lr * self.decay_factor ** (epochs_since_reset // self.decay_every_epochs)


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray]
    epochs_since_reset: int
    current_lr: float


def init_state(theta: ModelParams, cfg: SgdConfig) -> SgdState:
    return SgdState({k: np.zeros_like(v) for k, v in theta.tensors().items()}, 0, cfg.lr_at(0))


def sgd_step(theta: ModelParams, grads: dict[str, np.ndarray], state: SgdState, cfg: SgdConfig) -> None:
    """In place: g' = g + wd*theta; v = momentum*v + g'; theta -= lr*v."""
    params = theta.tensors()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        p -= state.current_lr * v


def epoch_tick(state: SgdState, cfg: SgdConfig) -> None:
    state.epochs_since_reset += 1
    state.current_lr = cfg.lr_at(state.epochs_since_reset)


def reset(state: SgdState, cfg: SgdConfig) -> None:
    """Zero the momentum buffers and restart the LR schedule; parameters are not touched."""
    for v in state.velocity.values():
        v.fill(0.0)
    state.epochs_since_reset = 0
    state.current_lr = cfg.lr_at(0)
