"""
SGD with Nesterov momentum and a multi-step learning-rate schedule.
"""

import logging
from decimal import Decimal

import numpy as np

from core.errors import DimensionError
from models import TrainConfig

logger = logging.getLogger(__name__)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr_init · gamma^(milestones passed), evaluated in decimal so 0.01·0.1 is exactly 0.001."""
    if epoch < 0:
        raise ValueError(f'epoch must be >= 0, got {epoch}')
    passed = sum(1 for milestone in cfg.milestones if epoch >= milestone)
    return float(Decimal(str(cfg.lr_init)) * Decimal(str(cfg.lr_gamma)) ** passed)


def sgd_step(params, grads, state, cfg: TrainConfig, lr: float) -> list:
    """One update of every parameter in place; returns the new velocity list.

    g = grad + wd·θ (decay parameters only), v = μ·v + g, then
    θ -= lr·(g + μ·v) with Nesterov or θ -= lr·v without.
    """
    if not (len(params) == len(grads) == len(state)):
        raise DimensionError(f'{len(params)} parameters, {len(grads)} gradients, {len(state)} velocities')
    mu = cfg.momentum
    new_state = []
    for param, grad, velocity in zip(params, grads, state):
        g = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if g.shape != param.shape:
            raise DimensionError(f'{param.name}: gradient {g.shape} vs parameter {param.shape}')
        if cfg.weight_decay and getattr(param, 'decay', True):
            g = g + cfg.weight_decay * param.data
        v = g if velocity is None else mu * velocity + g
        step = g + mu * v if cfg.nesterov else v
        param.assign(param.data - lr * step)
        new_state.append(v)
    return new_state


class SGD:
    """Holds the velocity of every parameter between steps."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float):
        self.velocity = sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.cfg, lr)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()
