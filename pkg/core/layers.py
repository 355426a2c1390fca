"""
Parameter holders shared by blocks and networks.
Each holder owns its Parameters, knows its dotted name prefix, and is
callable on a Tensor.
"""

import numpy as np

from core import functional as F
from core.functional import RunningStats
from core.tensor import Parameter
from models import ConvSpec


def kaiming_fan_out(rng: np.random.Generator, shape) -> np.ndarray:
    """Normal init with std sqrt(2 / fan_out), fan_out = Cout·K·K."""
    fan_out = shape[0] * int(np.prod(shape[2:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)


class BatchNorm:
    def __init__(self, channels: int, name: str):
        self.name = name
        self.gamma = Parameter(np.ones(channels), f'{name}.gamma', decay=False)
        self.beta = Parameter(np.zeros(channels), f'{name}.beta', decay=False)
        self.stats = RunningStats.fresh(channels)

    def __call__(self, x, training: bool = True):
        return F.batch_norm(x, self.gamma, self.beta, self.stats, 'train' if training else 'eval')

    def named_parameters(self):
        yield self.gamma.name, self.gamma
        yield self.beta.name, self.beta

    def named_buffers(self):
        yield f'{self.name}.running_mean', self.stats, 'mean'
        yield f'{self.name}.running_var', self.stats, 'var'


class ConvBN:
    """Bias-free convolution, batch norm, then ReLU6 unless linear."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, name: str, activation: bool = True):
        self.spec = spec.validate()
        self.name = name
        self.activation = activation
        self.weight = Parameter(kaiming_fan_out(rng, spec.weight_shape), f'{name}.weight')
        self.bn = BatchNorm(spec.out_channels, f'{name}.bn')

    def __call__(self, x, training: bool = True):
        y = self.bn(F.conv2d(x, self.weight, None, self.spec), training)
        return F.relu6(y) if self.activation else y

    def named_parameters(self):
        yield self.weight.name, self.weight
        yield from self.bn.named_parameters()

    def named_buffers(self):
        yield from self.bn.named_buffers()


class Dense:
    """Fully connected layer; weight is Cout×Cin."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str,
                 bias: bool = True, std: float = None):
        self.name = name
        if std is None:
            std = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.normal(0.0, std, size=(out_features, in_features)), f'{name}.weight')
        self.bias = Parameter(np.zeros(out_features), f'{name}.bias', decay=False) if bias else None

    def __call__(self, x):
        return F.fully_connected(x, self.weight, self.bias)

    def named_parameters(self):
        yield self.weight.name, self.weight
        if self.bias is not None:
            yield self.bias.name, self.bias
