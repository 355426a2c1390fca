"""
Executable networks built from a NetworkSpec.
"""

import logging

import numpy as np

from core import functional as F
from core.arch import plan_layers, validate_spec
from core.blocks import (
    ant_block_forward,
    e_ant_block_forward,
    init_ant_block,
    init_e_ant_block,
    inverted_residual_forward,
)
from core.errors import DimensionError
from core.layers import ConvBN, Dense
from core.tensor import Tensor, no_grad
from models import NetworkSpec

logger = logging.getLogger(__name__)

CLASSIFIER_INIT_STD = 0.01


class ConvUnit:
    def __init__(self, plan, rng):
        self.plan = plan
        self.layer = ConvBN(plan.conv, rng, plan.name)

    def forward(self, x, training):
        return self.layer(x, training)

    def named_parameters(self):
        yield from self.layer.named_parameters()

    def named_buffers(self):
        yield from self.layer.named_buffers()


class BlockUnit:
    def __init__(self, plan, rng):
        self.plan = plan
        self.params = init_ant_block(plan.block, rng, plan.name)
        self._forward = inverted_residual_forward if plan.op == 'inverted_residual' else ant_block_forward

    def forward(self, x, training):
        return self._forward(x, self.params, self.plan.block, training)

    def named_parameters(self):
        yield from self.params.named_parameters()

    def named_buffers(self):
        yield from self.params.named_buffers()


class EnsembleUnit:
    def __init__(self, plan, rng):
        self.plan = plan
        self.params = init_e_ant_block(plan.block, plan.branch_groups, rng, plan.name, plan.share_trunk)

    def forward(self, x, training):
        return e_ant_block_forward(x, self.params, self.plan.block, training)

    def named_parameters(self):
        yield from self.params.named_parameters()

    def named_buffers(self):
        yield from self.params.named_buffers()


class PoolUnit:
    def __init__(self, plan, rng):
        self.plan = plan

    def forward(self, x, training):
        return F.global_avg_pool(x)

    def named_parameters(self):
        return iter(())

    def named_buffers(self):
        return iter(())


class ClassifierUnit:
    def __init__(self, plan, rng):
        self.plan = plan
        self.dense = Dense(plan.in_shape[0], plan.out_shape[0], rng, plan.name, bias=True, std=CLASSIFIER_INIT_STD)

    def forward(self, x, training):
        return self.dense(F.flatten(x))

    def named_parameters(self):
        yield from self.dense.named_parameters()

    def named_buffers(self):
        return iter(())


_UNITS = {
    'conv2d': ConvUnit,
    'conv1x1': ConvUnit,
    'antblock': BlockUnit,
    'inverted_residual': BlockUnit,
    'e_antblock': EnsembleUnit,
    'avgpool': PoolUnit,
    'fc': ClassifierUnit,
}


class Network:
    """Units in execution order plus the ordered parameter list the trainer updates."""

    def __init__(self, spec: NetworkSpec, units: list, seed: int = 0):
        self.spec = spec
        self.units = units
        self.seed = seed
        self.training = True

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x, training: bool = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1:] != tuple(self.spec.input_shape):
            raise DimensionError(f'{self.spec.name} expects N×{"×".join(map(str, self.spec.input_shape))} input, '
                                 f'got {x.shape}')
        training = self.training if training is None else training
        for unit in self.units:
            x = unit.forward(x, training)
        return x

    __call__ = forward

    def first_nonfinite_unit(self, x, training: bool = None):
        """Name of the first unit whose output holds a NaN or infinity, or None.

        BN running statistics are left as they were, even in training mode.
        """
        training = self.training if training is None else training
        x = x if isinstance(x, Tensor) else Tensor(x)
        saved = [(stats, attr, np.copy(getattr(stats, attr))) for _, stats, attr in self.named_buffers()]
        try:
            with no_grad():
                for unit in self.units:
                    x = unit.forward(x, training)
                    if not np.all(np.isfinite(x.data)):
                        return unit.plan.name
            return None
        finally:
            for stats, attr, value in saved:
                setattr(stats, attr, value)

    def named_parameters(self) -> list:
        return [pair for unit in self.units for pair in unit.named_parameters()]

    def parameters(self) -> list:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self) -> list:
        return [entry for unit in self.units for entry in unit.named_buffers()]

    def lambdas(self) -> list:
        return [unit.params.lambdas for unit in self.units if isinstance(unit, EnsembleUnit)]

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def parameter_count(self) -> int:
        return sum(param.size for param in self.parameters())


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Deterministic initialization: the same spec and seed give bit-identical parameters."""
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    units = [_UNITS[plan.op](plan, rng) for plan in plan_layers(spec)]
    network = Network(spec, units, seed)
    logger.info('built %s: %d units, %d parameters', spec.name, len(units), network.parameter_count())
    return network
