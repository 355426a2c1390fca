"""
ANTBlock, the inverted residual baseline and the e-ANTBlock ensemble.

An ANTBlock is expansion (1x1, ReLU6) -> depthwise 3x3 (ReLU6) -> channel
attention -> linear grouped 1x1 projection, with a residual skip when the
stride is 1 and the channel counts match. The attention unit can also sit
before the expansion, after the projection, or be left out entirely, which
gives the inverted residual block.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from core import functional as F
from core.errors import ConfigurationError, DimensionError
from core.layers import ConvBN, Dense
from core.tensor import Parameter, Tensor
from models import BlockConfig

logger = logging.getLogger(__name__)


@dataclass
class AttentionParams:
    fc1: Dense
    fc2: Dense
    activation: str = 'relu'

    @property
    def channels(self):
        return self.fc1.weight.shape[1]

    def named_parameters(self):
        yield from self.fc1.named_parameters()
        yield from self.fc2.named_parameters()


@dataclass
class AntBlockParams:
    expansion: ConvBN
    depthwise: ConvBN
    attention: AttentionParams
    projection: ConvBN
    shortcut: ConvBN = None

    def _parts(self):
        return [p for p in (self.expansion, self.depthwise, self.attention, self.projection, self.shortcut)
                if p is not None]

    def named_parameters(self):
        for part in self._parts():
            yield from part.named_parameters()

    def named_buffers(self):
        for part in self._parts():
            if hasattr(part, 'named_buffers'):
                yield from part.named_buffers()


@dataclass
class EAntBlockParams:
    branches: list
    lambdas: Parameter
    branch_groups: tuple
    shortcut: ConvBN = None
    share_trunk: bool = False

    def named_parameters(self):
        seen = set()
        for branch in self.branches:
            for name, param in branch.named_parameters():
                if id(param) not in seen:
                    seen.add(id(param))
                    yield name, param
        yield self.lambdas.name, self.lambdas
        if self.shortcut is not None:
            yield from self.shortcut.named_parameters()

    def named_buffers(self):
        seen = set()
        for branch in self.branches:
            for name, stats, attr in branch.named_buffers():
                if (id(stats), attr) not in seen:
                    seen.add((id(stats), attr))
                    yield name, stats, attr
        if self.shortcut is not None:
            yield from self.shortcut.named_buffers()


# ── Initialization ──────────────────────────────────────

def init_attention(channels: int, reduction: int, rng: np.random.Generator, name: str,
                   activation: str = 'relu', bias: bool = True) -> AttentionParams:
    if reduction < 1 or channels % reduction:
        raise ConfigurationError(f'attention channels {channels} not divisible by reduction ratio r={reduction}')
    hidden = channels // reduction
    return AttentionParams(
        fc1=Dense(channels, hidden, rng, f'{name}.fc1', bias=bias),
        fc2=Dense(hidden, channels, rng, f'{name}.fc2', bias=bias),
        activation=activation,
    )


def init_ant_block(cfg: BlockConfig, rng: np.random.Generator, name: str = 'block',
                   with_shortcut: bool = True) -> AntBlockParams:
    """Draw parameters in execution order: expansion, depthwise, attention, projection, shortcut."""
    cfg.validate()
    logger.debug('init %s %s', name, cfg)
    expansion = ConvBN(cfg.expansion_spec(), rng, f'{name}.expand') if cfg.has_expansion else None
    depthwise = ConvBN(cfg.depthwise_spec(), rng, f'{name}.dwise')
    attention = None
    if cfg.has_attention:
        attention = init_attention(cfg.attention_channels, cfg.reduction, rng, f'{name}.attention',
                                   cfg.attention_activation, cfg.attention_bias)
    projection = ConvBN(cfg.projection_spec(), rng, f'{name}.project', activation=False)
    shortcut = None
    if with_shortcut and cfg.has_shortcut:
        shortcut = ConvBN(cfg.shortcut_spec(), rng, f'{name}.shortcut', activation=False)
    return AntBlockParams(expansion, depthwise, attention, projection, shortcut)


def init_e_ant_block(cfg: BlockConfig, branch_groups, rng: np.random.Generator, name: str = 'block',
                     share_trunk: bool = False) -> EAntBlockParams:
    """One ANTBlock per entry of branch_groups; logits start at zero (plain average)."""
    if not branch_groups:
        raise ConfigurationError('an e-ANTBlock needs at least one branch')
    branches = []
    for j, groups in enumerate(branch_groups):
        branch_cfg = replace(cfg, groups=groups).validate()
        if share_trunk and branches:
            first = branches[0]
            projection = ConvBN(branch_cfg.projection_spec(), rng, f'{name}.b{j}.project', activation=False)
            branches.append(AntBlockParams(first.expansion, first.depthwise, first.attention, projection))
        else:
            branches.append(init_ant_block(branch_cfg, rng, f'{name}.b{j}', with_shortcut=False))
    lambdas = Parameter(np.zeros(len(branch_groups)), f'{name}.lambda', decay=False)
    shortcut = None
    if cfg.has_shortcut:
        shortcut = ConvBN(cfg.shortcut_spec(), rng, f'{name}.shortcut', activation=False)
    return EAntBlockParams(branches, lambdas, tuple(branch_groups), shortcut, share_trunk)


# ── Forward ─────────────────────────────────────────────

def channel_attention(u: Tensor, params: AttentionParams) -> Tensor:
    """Per-channel mask in (0, 1), shape N×C×1×1, from the globally pooled map."""
    if u.ndim != 4 or u.shape[1] != params.channels:
        raise DimensionError(f'attention over {params.channels} channels got input {u.shape}')
    n, c = u.shape[:2]
    h = params.fc1(F.flatten(F.global_avg_pool(u)))
    if params.activation == 'relu':
        h = F.relu(h)
    return F.sigmoid(params.fc2(h)).reshape(n, c, 1, 1)


def _trunk(x: Tensor, params: AntBlockParams, cfg: BlockConfig, training: bool) -> Tensor:
    h = x
    if cfg.placement == 'before_expansion':
        h = h * channel_attention(h, params.attention)
    if params.expansion is not None:
        h = params.expansion(h, training)
    u = params.depthwise(h, training)
    if cfg.placement == 'between':
        u = u * channel_attention(u, params.attention)
    return u


def _head(u: Tensor, params: AntBlockParams, cfg: BlockConfig, training: bool) -> Tensor:
    out = params.projection(u, training)
    if cfg.placement == 'after_projection':
        out = out * channel_attention(out, params.attention)
    return out


def residual_function(x: Tensor, params: AntBlockParams, cfg: BlockConfig, training: bool = True) -> Tensor:
    """The non-residual part of an ANTBlock."""
    return _head(_trunk(x, params, cfg, training), params, cfg, training)


def _check_input(x: Tensor, cfg: BlockConfig):
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f'block expects N×{cfg.in_channels}×H×W input, got {x.shape}')


def ant_block_forward(x: Tensor, params: AntBlockParams, cfg: BlockConfig, training: bool = True) -> Tensor:
    cfg.validate()
    _check_input(x, cfg)
    out = residual_function(x, params, cfg, training)
    if cfg.has_residual:
        return x + out
    if params.shortcut is not None:
        return params.shortcut(x, training) + out
    return out


def inverted_residual_forward(x: Tensor, params: AntBlockParams, cfg: BlockConfig, training: bool = True) -> Tensor:
    if cfg.placement != 'none' or cfg.groups != 1:
        raise ConfigurationError('an inverted residual block has no attention unit and g=1')
    return ant_block_forward(x, params, cfg, training)


def block_weights(params: EAntBlockParams) -> Tensor:
    return F.softmax(params.lambdas)


def e_ant_block_forward(x: Tensor, params: EAntBlockParams, cfg: BlockConfig, training: bool = True) -> Tensor:
    """x + sum_j softmax(lambda)_j * F_j(x), with F_j the branch residual functions."""
    _check_input(x, cfg)
    if len(params.branches) != len(params.branch_groups) or params.lambdas.shape != (len(params.branches),):
        raise ConfigurationError(
            f'{len(params.branches)} branches, {len(params.branch_groups)} group settings, '
            f'{params.lambdas.shape} logits')
    weights = block_weights(params)
    shared = None
    total = None
    for j, (branch, groups) in enumerate(zip(params.branches, params.branch_groups)):
        branch_cfg = replace(cfg, groups=groups).validate()
        if params.share_trunk:
            if shared is None:
                shared = _trunk(x, branch, branch_cfg, training)
            u = shared
        else:
            u = _trunk(x, branch, branch_cfg, training)
        term = _head(u, branch, branch_cfg, training)
        if term.shape[1:] != (cfg.out_channels,) + cfg.output_hw(*x.shape[2:]):
            raise ConfigurationError(f'branch {j} produced shape {term.shape}')
        term = term * weights[j]
        total = term if total is None else total + term
    if cfg.has_residual:
        return x + total
    if params.shortcut is not None:
        return params.shortcut(x, training) + total
    return total
