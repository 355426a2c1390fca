from dataclasses import dataclass, field

from core.errors import ConfigurationError

PLACEMENTS = ('between', 'before_expansion', 'after_projection', 'none')
ATTENTION_ACTIVATIONS = ('relu', 'none')
OPERATORS = ('conv2d', 'antblock', 'e_antblock', 'inverted_residual', 'conv1x1', 'avgpool', 'fc')
BLOCK_OPERATORS = ('antblock', 'e_antblock', 'inverted_residual')


def _shape_str(shape):
    return 'x'.join(str(v) for v in shape)


@dataclass(frozen=True)
class ConvSpec:
    """One convolution: channel counts, square kernel, stride, padding and groups."""
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h, w):
        return ((h + 2 * self.padding - self.kernel) // self.stride + 1,
                (w + 2 * self.padding - self.kernel) // self.stride + 1)

    def validate(self):
        for name in ('in_channels', 'out_channels', 'kernel', 'stride', 'groups'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'conv {name} must be >= 1, got {getattr(self, name)}')
        if self.padding < 0:
            raise ConfigurationError(f'conv padding must be >= 0, got {self.padding}')
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f'conv channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}')
        return self

    def to_dict(self):
        return {
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
            'kernel': self.kernel,
            'stride': self.stride,
            'padding': self.padding,
            'groups': self.groups,
            'bias': self.bias,
        }


@dataclass(frozen=True)
class BlockConfig:
    """Hyperparameters of one ANTBlock (or inverted residual block when placement is none).

    expand_t1 and projection_shortcut only exist to reproduce the published
    baseline budgets. With projection_shortcut off, a block with C1 != C2 has
    no skip path at all; with expand_t1 off, a t=1 block goes straight to the
    depthwise conv as in stock MobileNetV2.
    """
    in_channels: int
    out_channels: int
    expansion: int = 1
    stride: int = 1
    groups: int = 1
    reduction: int = 8
    placement: str = 'between'
    attention_activation: str = 'relu'
    attention_bias: bool = True
    expand_t1: bool = True           # a t=1 block keeps its 1x1 C1->C1 expansion
    projection_shortcut: bool = False  # stride-1 blocks with C1 != C2 add a 1x1 conv shortcut
    kernel: int = 3

    @property
    def expanded_channels(self):
        return self.in_channels * self.expansion

    @property
    def has_expansion(self):
        return self.expansion > 1 or self.expand_t1

    @property
    def has_attention(self):
        return self.placement != 'none'

    @property
    def attention_channels(self):
        return {
            'between': self.expanded_channels,
            'before_expansion': self.in_channels,
            'after_projection': self.out_channels,
        }.get(self.placement)

    @property
    def has_residual(self):
        return self.stride == 1 and self.in_channels == self.out_channels

    @property
    def has_shortcut(self):
        return self.projection_shortcut and self.stride == 1 and self.in_channels != self.out_channels

    def expansion_spec(self):
        return ConvSpec(self.in_channels, self.expanded_channels, 1)

    def depthwise_spec(self):
        c = self.expanded_channels
        return ConvSpec(c, c, self.kernel, self.stride, self.kernel // 2, c)

    def projection_spec(self):
        return ConvSpec(self.expanded_channels, self.out_channels, 1, 1, 0, self.groups)

    def shortcut_spec(self):
        return ConvSpec(self.in_channels, self.out_channels, 1)

    def output_hw(self, h, w):
        return self.depthwise_spec().output_hw(h, w)

    def validate(self):
        for name in ('in_channels', 'out_channels', 'expansion', 'groups'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'block {name} must be >= 1, got {getattr(self, name)}')
        if self.stride not in (1, 2):
            raise ConfigurationError(f'block stride must be 1 or 2, got {self.stride}')
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f'unknown attention placement {self.placement!r}')
        if self.attention_activation not in ATTENTION_ACTIVATIONS:
            raise ConfigurationError(f'unknown attention activation {self.attention_activation!r}')
        c = self.expanded_channels
        if c % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f'expanded channels {c} and output channels {self.out_channels} must be divisible by g={self.groups}')
        if self.has_attention:
            if self.reduction < 1:
                raise ConfigurationError(f'reduction ratio must be >= 1, got {self.reduction}')
            width = self.attention_channels
            if width % self.reduction:
                raise ConfigurationError(
                    f'attention channels {width} not divisible by reduction ratio r={self.reduction}')
        return self

    def to_dict(self):
        return {
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
            'expansion': self.expansion,
            'stride': self.stride,
            'groups': self.groups,
            'reduction': self.reduction,
            'placement': self.placement,
            'attention_activation': self.attention_activation,
            'attention_bias': self.attention_bias,
            'expand_t1': self.expand_t1,
            'projection_shortcut': self.projection_shortcut,
        }


@dataclass(frozen=True)
class StageSpec:
    """One row of an architecture table."""
    name: str
    op: str
    out_channels: int
    n: int = 1
    s: int = 1
    t: int = 1
    r: int = 0
    g: int = 1
    placement: str = 'none'
    branch_groups: tuple = ()   # e_antblock only
    share_trunk: bool = False   # e_antblock only

    @property
    def is_block(self):
        return self.op in BLOCK_OPERATORS

    def to_dict(self):
        data = {
            'name': self.name,
            'op': self.op,
            'out_channels': self.out_channels,
            'n': self.n,
            's': self.s,
            't': self.t,
            'r': self.r,
            'g': self.g,
            'placement': self.placement,
        }
        if self.op == 'e_antblock':
            data['branch_groups'] = list(self.branch_groups)
            data['share_trunk'] = self.share_trunk
        return data


@dataclass(frozen=True)
class NetworkSpec:
    """A whole network as an ordered list of stages."""
    name: str
    input_shape: tuple
    num_classes: int
    stages: tuple
    alpha: float = 1.0
    expand_t1: bool = True
    projection_shortcut: bool = True
    attention_bias: bool = True
    attention_activation: str = 'relu'

    def stage(self, name):
        for stage in self.stages:
            if stage.name == name:
                return stage
        raise KeyError(name)

    @property
    def block_count(self):
        return sum(stage.n for stage in self.stages if stage.is_block)

    def to_dict(self):
        return {
            'name': self.name,
            'input_shape': list(self.input_shape),
            'num_classes': self.num_classes,
            'alpha': self.alpha,
            'expand_t1': self.expand_t1,
            'projection_shortcut': self.projection_shortcut,
            'attention_bias': self.attention_bias,
            'attention_activation': self.attention_activation,
            'stages': [stage.to_dict() for stage in self.stages],
        }


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loop settings. Defaults are the full-scale recipe."""
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 4.0e-5
    lr_init: float = 0.01
    lr_gamma: float = 0.1
    milestones: tuple = (200, 300)
    max_epochs: int = 400
    batch_size: int = 128
    seed: int = 0
    shuffle: bool = True
    augment: bool = False  # the CLI turns it on for real 32x32 data

    def validate(self):
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigurationError('max_epochs must be >= 0 and batch_size >= 1')
        if self.lr_init < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError('lr_init and weight_decay must be >= 0, momentum in [0, 1)')
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigurationError(f'milestones must be ascending, got {list(self.milestones)}')
        return self

    def to_dict(self):
        return {
            'momentum': self.momentum,
            'nesterov': self.nesterov,
            'weight_decay': self.weight_decay,
            'lr_init': self.lr_init,
            'lr_gamma': self.lr_gamma,
            'milestones': list(self.milestones),
            'max_epochs': self.max_epochs,
            'batch_size': self.batch_size,
            'seed': self.seed,
            'shuffle': self.shuffle,
            'augment': self.augment,
        }


@dataclass(frozen=True)
class CostConventions:
    """Counting switches echoed in every cost report."""
    count_bn_params: bool = True
    count_attention: bool = True
    count_attention_bias: bool = True
    branch_sharing: bool = False

    @property
    def label(self):
        parts = []
        if not self.count_bn_params:
            parts.append('no-bn')
        if not self.count_attention:
            parts.append('no-attention')
        elif not self.count_attention_bias:
            parts.append('no-attention-bias')
        if self.branch_sharing:
            parts.append('sharing')
        return ','.join(parts) or 'default'

    def to_dict(self):
        return {
            'count_bn_params': self.count_bn_params,
            'count_attention': self.count_attention,
            'count_attention_bias': self.count_attention_bias,
            'branch_sharing': self.branch_sharing,
            'label': self.label,
        }


# Convention under which the published budget tables reproduce.
PUBLISHED_CONVENTIONS = CostConventions(count_bn_params=False, count_attention_bias=False)


@dataclass(frozen=True)
class CostRow:
    layer: str
    op: str
    out_shape: tuple
    params: int
    madds: int

    def to_dict(self):
        return {
            'layer': self.layer,
            'op': self.op,
            'out_shape': _shape_str(self.out_shape),
            'params': self.params,
            'madds': self.madds,
        }


@dataclass(frozen=True)
class CostReport:
    """Per-layer accounting for one network under one set of conventions."""
    name: str
    rows: tuple
    conventions: CostConventions = field(default_factory=CostConventions)

    @property
    def params(self):
        return sum(row.params for row in self.rows)

    @property
    def madds(self):
        return sum(row.madds for row in self.rows)

    @property
    def totals(self):
        return self.params, self.madds

    def to_dict(self):
        return {
            'name': self.name,
            'conventions': self.conventions.to_dict(),
            'rows': [row.to_dict() for row in self.rows],
            'totals': {'params': self.params, 'madds': self.madds},
        }


@dataclass(frozen=True)
class FcrfVerdict:
    fcrf: bool
    witness: tuple = None
    matrix_density: float = 1.0
    shape: tuple = (0, 0)

    def to_dict(self):
        return {
            'fcrf': self.fcrf,
            'witness': list(self.witness) if self.witness is not None else None,
            'matrix_density': self.matrix_density,
        }


@dataclass(frozen=True)
class CommandResult:
    """Exit code plus the fully rendered report for standard output."""
    exit_code: int
    payload: str = ''

    @property
    def success(self):
        return self.exit_code == 0

    def to_dict(self):
        return {'exit_code': self.exit_code, 'success': self.success}
