"""
Channel receptive field analysis.

Every layer maps to a boolean matrix whose entry (o, i) is true when output
channel o can depend on input channel i. Sequences compose by boolean matrix
product; residual and ensemble nodes merge their paths by union. A block or
network has a full channel receptive field when the end-to-end matrix is
all-true. Dependency is structural: zero weights never shrink a matrix.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from core.arch import plan_layers
from core.errors import AnalysisError
from models import BlockConfig, FcrfVerdict, NetworkSpec

logger = logging.getLogger(__name__)

LAYOUTS = ('contiguous', 'interleaved')
STARTS = ('input', 'depthwise')


class DependencyMatrix:
    """Boolean C_out × C_in reachability matrix."""

    def __init__(self, bits):
        bits = np.array(bits, dtype=bool)
        if bits.ndim != 2 or 0 in bits.shape:
            raise AnalysisError(f'a dependency matrix needs two non-empty axes, got shape {bits.shape}')
        bits.setflags(write=False)
        self.bits = bits

    @classmethod
    def identity(cls, channels):
        return cls(np.eye(channels, dtype=bool))

    @classmethod
    def full(cls, rows, cols):
        return cls(np.ones((rows, cols), dtype=bool))

    @classmethod
    def grouped(cls, out_channels, in_channels, groups, layout='contiguous'):
        """Pattern of a g-group convolution.

        contiguous: output group k reads input group k, groups laid out in
        consecutive channel runs (what conv2d computes). interleaved: the
        1-based output channel c reads input channels t+1 .. t+C_in/g with
        t = (c mod g)·C_in/g.
        """
        if layout not in LAYOUTS:
            raise AnalysisError(f'unknown group layout {layout!r}; expected one of {LAYOUTS}')
        if in_channels % groups or out_channels % groups:
            raise AnalysisError(f'channels {in_channels}->{out_channels} not divisible by groups={groups}')
        in_group = np.arange(in_channels) // (in_channels // groups)
        if layout == 'contiguous':
            out_group = np.arange(out_channels) // (out_channels // groups)
        else:
            out_group = (np.arange(out_channels) + 1) % groups
        return cls(out_group[:, None] == in_group[None, :])

    @property
    def shape(self):
        return self.bits.shape

    @property
    def rows(self):
        return self.bits.shape[0]

    @property
    def cols(self):
        return self.bits.shape[1]

    def compose(self, first: 'DependencyMatrix') -> 'DependencyMatrix':
        """self ∘ first: apply first, then self."""
        if self.cols != first.rows:
            raise AnalysisError(f'channel chain mismatch: {first.rows} channels feed a layer expecting {self.cols}')
        return DependencyMatrix(self.bits.astype(np.int64) @ first.bits.astype(np.int64) > 0)

    def union(self, other: 'DependencyMatrix') -> 'DependencyMatrix':
        if self.shape != other.shape:
            raise AnalysisError(f'cannot merge paths of shapes {self.shape} and {other.shape}')
        return DependencyMatrix(self.bits | other.bits)

    @property
    def is_full(self):
        return bool(self.bits.all())

    def witness(self):
        """First uncovered (output, input) pair in row-major order, or None."""
        missing = np.argwhere(~self.bits)
        if not len(missing):
            return None
        o, i = missing[0]
        return int(o), int(i)

    @property
    def density(self):
        return float(self.bits.mean())

    def to_grid(self) -> str:
        return '\n'.join(''.join('1' if bit else '0' for bit in row) for row in self.bits) + '\n'

    def __eq__(self, other):
        return isinstance(other, DependencyMatrix) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f'DependencyMatrix({self.rows}x{self.cols}, density={self.density:.3f})'


@dataclass(frozen=True)
class DepNode:
    """One analyzable layer.

    kind is conv, depthwise, attention, batch_norm, activation, global_pool,
    fc or residual. A residual node unions its branches with the skip path:
    skip=() is the identity, a tuple of nodes is a projection shortcut, and
    None means the branches alone.
    """
    name: str
    kind: str
    in_channels: int
    out_channels: int
    groups: int = 1
    branches: tuple = ()
    skip: tuple = ()


def _per_channel(name, kind, channels):
    return DepNode(name, kind, channels, channels)


def layer_dependency(layer: DepNode, layout: str = 'contiguous') -> DependencyMatrix:
    kind = layer.kind
    if kind == 'conv':
        return DependencyMatrix.grouped(layer.out_channels, layer.in_channels, layer.groups, layout)
    if kind in ('depthwise', 'batch_norm', 'activation', 'global_pool'):
        if layer.in_channels != layer.out_channels:
            raise AnalysisError(f'{layer.name}: {kind} keeps its channel count, got '
                                f'{layer.in_channels}->{layer.out_channels}')
        return DependencyMatrix.identity(layer.in_channels)
    if kind in ('attention', 'fc'):
        return DependencyMatrix.full(layer.out_channels, layer.in_channels)
    if kind == 'residual':
        if not layer.branches:
            raise AnalysisError(f'{layer.name}: a residual node needs at least one branch')
        merged = None
        for branch in layer.branches:
            matrix = propagate(branch, layout)
            merged = matrix if merged is None else merged.union(matrix)
        if layer.skip is None:
            return merged
        skip = propagate(layer.skip, layout) if layer.skip else DependencyMatrix.identity(layer.in_channels)
        return merged.union(skip)
    raise AnalysisError(f'{layer.name}: unknown layer kind {kind!r}')


def propagate(layers, layout: str = 'contiguous') -> DependencyMatrix:
    """Boolean product of the per-layer matrices in execution order."""
    matrix = None
    for layer in layers:
        step = layer_dependency(layer, layout)
        if matrix is not None and step.cols != matrix.rows:
            raise AnalysisError(f'{layer.name}: expects {step.cols} input channels, previous layer gives {matrix.rows}')
        matrix = step if matrix is None else step.compose(matrix)
    if matrix is None:
        raise AnalysisError('nothing to propagate: empty layer list')
    return matrix


# ── Layer lists ─────────────────────────────────────────

def _conv_bn(name, spec, activation=True):
    nodes = [
        DepNode(name, 'depthwise' if spec.is_depthwise and spec.groups > 1 else 'conv',
                spec.in_channels, spec.out_channels, spec.groups),
        _per_channel(f'{name}.bn', 'batch_norm', spec.out_channels),
    ]
    if activation:
        nodes.append(_per_channel(f'{name}.relu6', 'activation', spec.out_channels))
    return nodes


def _attention(name, channels):
    return DepNode(f'{name}.attention', 'attention', channels, channels)


def _block_body(cfg: BlockConfig, name: str, start: str):
    body = []
    if start == 'input':
        if cfg.placement == 'before_expansion':
            body.append(_attention(name, cfg.in_channels))
        if cfg.has_expansion:
            body += _conv_bn(f'{name}.expand', cfg.expansion_spec())
    body += _conv_bn(f'{name}.dwise', cfg.depthwise_spec())
    if cfg.placement == 'between':
        body.append(_attention(name, cfg.expanded_channels))
    body += _conv_bn(f'{name}.project', cfg.projection_spec(), activation=False)
    if cfg.placement == 'after_projection':
        body.append(_attention(name, cfg.out_channels))
    return body


def _skip(cfg: BlockConfig, name: str):
    if cfg.has_residual:
        return ()
    if cfg.has_shortcut:
        return tuple(_conv_bn(f'{name}.shortcut', cfg.shortcut_spec(), activation=False))
    return None


def block_layers(cfg: BlockConfig, name: str = 'block', start: str = 'input', branch_groups=(),
                 share_trunk: bool = False) -> list:
    """Nodes of one ANTBlock, or of an e-ANTBlock when branch_groups is given.

    start='depthwise' begins at the depthwise layer and leaves out the skip
    path, whose input is the block input rather than the expanded map.
    """
    if start not in STARTS:
        raise AnalysisError(f'unknown start {start!r}; expected one of {STARTS}')
    cfg.validate()
    # shared trunks read the same channels as separate ones, so share_trunk
    # never changes the pattern
    groups = tuple(branch_groups) or (cfg.groups,)
    branches = tuple(tuple(_block_body(replace(cfg, groups=g), f'{name}.b{j}' if branch_groups else name, start))
                     for j, g in enumerate(groups))
    if start == 'depthwise':
        if len(branches) == 1:
            return list(branches[0])
        return [DepNode(name, 'residual', cfg.expanded_channels, cfg.out_channels, branches=branches, skip=None)]
    skip = _skip(cfg, name)
    if skip is None and len(branches) == 1:
        return list(branches[0])
    return [DepNode(name, 'residual', cfg.in_channels, cfg.out_channels, branches=branches, skip=skip)]


def network_layers(spec: NetworkSpec, start: str = 'input') -> list:
    """Nodes of the block stages of a network; conv stages when it has no blocks.

    The stem conv and the classifier head are dense and would make every
    network trivially full, so they are left out of the analyzed range.
    """
    plans = plan_layers(spec)
    blocks = [plan for plan in plans if plan.block is not None]
    nodes = []
    if blocks:
        for k, plan in enumerate(blocks):
            nodes += block_layers(plan.block, plan.name, start if k == 0 else 'input',
                                  plan.branch_groups if plan.op == 'e_antblock' else (), plan.share_trunk)
        return nodes
    for plan in plans:
        if plan.op in ('conv2d', 'conv1x1'):
            nodes += _conv_bn(plan.name, plan.conv)
    if not nodes:
        raise AnalysisError(f'{spec.name} has neither block nor conv stages to analyze')
    return nodes


def _layers_of(target, start):
    if isinstance(target, NetworkSpec):
        return network_layers(target, start)
    if isinstance(target, BlockConfig):
        return block_layers(target, start=start)
    target = list(target)
    if target and all(isinstance(item, BlockConfig) for item in target):
        nodes = []
        for k, cfg in enumerate(target):
            nodes += block_layers(cfg, f'block{k}', start if k == 0 else 'input')
        return nodes
    if target and all(isinstance(item, DepNode) for item in target):
        return target
    raise AnalysisError(f'cannot analyze {type(target).__name__}: expected a BlockConfig, a list of them, '
                        f'a NetworkSpec or a list of DepNodes')


def dependency_matrix(target, start: str = 'input', layout: str = 'contiguous') -> DependencyMatrix:
    return propagate(_layers_of(target, start), layout)


def check_fcrf(target, start: str = 'input', layout: str = 'contiguous') -> FcrfVerdict:
    matrix = dependency_matrix(target, start, layout)
    verdict = FcrfVerdict(matrix.is_full, matrix.witness(), matrix.density, matrix.shape)
    logger.debug('fcrf %s: %s (density %.3f)', getattr(target, 'name', type(target).__name__),
                 verdict.fcrf, verdict.matrix_density)
    return verdict
