"""
Architecture tables as data.

Builders return immutable NetworkSpec records for ANTNet (ImageNet and
CIFAR), e-ANTNet, the MobileNetV2 baseline and its attention variants.
plan_layers() walks a spec into per-block layer plans with their shapes;
every consumer (network builder, cost model, dependency analyzer, describe)
works from that plan. parse_spec()/emit_spec() define the JSON spec format.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, replace

from config import Config
from core.errors import ConfigurationError, SpecParseError
from models import (
    ATTENTION_ACTIVATIONS,
    BLOCK_OPERATORS,
    OPERATORS,
    PLACEMENTS,
    BlockConfig,
    ConvSpec,
    NetworkSpec,
    StageSpec,
)

logger = logging.getLogger(__name__)

# name, t, r, C, n, s
ANT_STAGES = (
    ('ant1', 1, 8, 16, 1, 1),
    ('ant2', 6, 8, 24, 2, 2),
    ('ant3', 6, 12, 32, 3, 2),
    ('ant4', 6, 16, 64, 4, 2),
    ('ant5', 6, 24, 96, 3, 1),
    ('ant6', 6, 32, 160, 3, 2),
    ('ant7', 6, 64, 320, 1, 1),
)
STEM_CHANNELS = 32
HEAD_CHANNELS = 1280

DATASETS = {
    'imagenet': {'input_shape': (3, 224, 224), 'num_classes': 1000},
    'cifar': {'input_shape': (3, 32, 32), 'num_classes': 100},
}


@dataclass(frozen=True)
class LayerPlan:
    """One executable unit of a spec: a conv, a block, the pool or the classifier."""
    name: str
    stage: str
    op: str
    in_shape: tuple
    out_shape: tuple
    conv: ConvSpec = None
    block: BlockConfig = None
    branch_groups: tuple = ()
    share_trunk: bool = False


# ── Channel rounding ────────────────────────────────────

def make_divisible(value: float, divisor: int) -> int:
    """Nearest multiple of divisor (at least divisor), bumped once if it loses more than 10%."""
    rounded = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor
    return rounded


def fit_reduction(r: int, widths) -> int:
    """Largest divisor of every attention width that does not exceed r."""
    widths = [w for w in widths if w]
    if not widths or r < 1:
        return r
    common = math.gcd(*widths)
    return max(d for d in range(1, min(r, common) + 1) if common % d == 0)


def _attention_widths(placement, c_in, c_out, t, n):
    if placement == 'between':
        return [c_in * t] + ([c_out * t] if n > 1 else [])
    if placement == 'before_expansion':
        return [c_in] + ([c_out] if n > 1 else [])
    if placement == 'after_projection':
        return [c_out]
    return []


def _stage_multiple(t, r, g, t_next, r_next, g_next):
    m = math.lcm(8, g)
    if r:
        m = math.lcm(m, r // math.gcd(r, t))
    if r_next:
        m = math.lcm(m, r_next // math.gcd(r_next, t_next))
    if g_next:
        m = math.lcm(m, g_next // math.gcd(g_next, t_next))
    return m


def _scaled_channels(rows, alpha, groups):
    """Stem, stage and head widths under width multiplier alpha.

    rows are (t, r, C) per block stage; groups is the projection group count
    per stage. alpha == 1 keeps the table values.
    """
    table = [c for _, _, c in rows]
    if alpha == 1.0:
        return STEM_CHANNELS, table, HEAD_CHANNELS
    stem = make_divisible(STEM_CHANNELS * alpha, _stage_multiple(1, 0, 1, rows[0][0], rows[0][1], groups[0]))
    scaled = []
    for i, (t, r, c) in enumerate(rows):
        if i + 1 < len(rows):
            t_next, r_next, _ = rows[i + 1]
            g_next = groups[i + 1]
        else:
            t_next, r_next, g_next = 1, 0, 0
        scaled.append(make_divisible(c * alpha, _stage_multiple(t, r, groups[i], t_next, r_next, g_next)))
    head = make_divisible(HEAD_CHANNELS * alpha, 8) if alpha > 1.0 else HEAD_CHANNELS
    return stem, scaled, head


# ── Builders ────────────────────────────────────────────

def _build(name, dataset, num_classes, *, op, g, alpha=1.0, placement='between', reduction=None,
           unstrided_stage=None, branch_groups=(), share_trunk=False, stage_prefix='ant',
           expand_t1=True, projection_shortcut=True):
    if dataset not in DATASETS:
        raise ConfigurationError(f'unknown dataset {dataset!r}; expected one of {sorted(DATASETS)}')
    if alpha <= 0:
        raise ConfigurationError(f'width multiplier must be > 0, got {alpha}')
    if placement not in PLACEMENTS:
        raise ConfigurationError(f'unknown attention placement {placement!r}')
    input_shape = DATASETS[dataset]['input_shape']
    num_classes = num_classes or DATASETS[dataset]['num_classes']
    cifar = dataset == 'cifar'
    attention = op != 'inverted_residual' and placement != 'none'

    rows = []
    groups = []
    for stage_name, t, r, c, n, s in ANT_STAGES:
        rows.append((t, r if attention else 0, c))
        if op == 'e_antblock':
            groups.append(math.lcm(*branch_groups))
        else:
            groups.append(1 if stage_name == 'ant1' else g)
    stem, channels, head = _scaled_channels(rows, alpha, groups)

    stages = [StageSpec('conv0', 'conv2d', stem, 1, 1 if cifar else 2)]
    c_in = stem
    for i, (stage_name, t, r, _, n, s) in enumerate(ANT_STAGES):
        c = channels[i]
        if cifar and stage_name == unstrided_stage:
            s = 1
        if attention:
            r = r if reduction is None else reduction
            r = fit_reduction(r, _attention_widths(placement, c_in, c, t, n))
        else:
            r = 0
        label = stage_name.replace('ant', stage_prefix)
        if op == 'e_antblock':
            stages.append(StageSpec(label, op, c, n, s, t, r, 1, placement, tuple(branch_groups), share_trunk))
        else:
            stages.append(StageSpec(label, op, c, n, s, t, r, groups[i], placement if attention else 'none'))
        c_in = c
    stages.append(StageSpec('conv8', 'conv1x1', head))
    stages.append(StageSpec('pool9', 'avgpool', head))
    stages.append(StageSpec('fc10', 'fc', num_classes))
    spec = NetworkSpec(name, input_shape, num_classes, tuple(stages), alpha,
                       expand_t1, projection_shortcut)
    validate_spec(spec)
    logger.debug('built spec %s (%d blocks)', name, spec.block_count)
    return spec


_PLACEMENT_SUFFIX = {'between': '', 'before_expansion': '_c_pre', 'after_projection': '_c_post', 'none': '_noatt'}


def antnet_imagenet(g: int = 2, alpha: float = 1.0, num_classes: int = None, placement: str = 'between',
                    reduction: int = None, name: str = None) -> NetworkSpec:
    """ANTNet on 3x224x224 input. g applies to ant2-ant7; ant1 is always g=1."""
    if name is None:
        name = f'antnet_imagenet_g{g}' + ('' if alpha == 1.0 else f'_a{round(alpha * 10)}')
        name += _PLACEMENT_SUFFIX[placement] if placement in _PLACEMENT_SUFFIX else ''
        name += f'_r{reduction}' if reduction else ''
    return _build(name, 'imagenet', num_classes, op='antblock', g=g, alpha=alpha, placement=placement,
                  reduction=reduction)


def antnet_cifar(g: int = 2, num_classes: int = None, placement: str = 'between', reduction: int = None,
                 unstrided_stage: str = 'ant2', name: str = None) -> NetworkSpec:
    """ANTNet on 3x32x32 input: conv0 and one strided stage run at stride 1.

    unstrided_stage='ant2' reproduces the published CIFAR budgets; 'ant6'
    is the stage that produces the 14x14x96 features at ImageNet scale.
    """
    if name is None:
        name = f'antnet_cifar_g{g}'
        name += _PLACEMENT_SUFFIX[placement] if placement in _PLACEMENT_SUFFIX else ''
        name += f'_r{reduction}' if reduction else ''
    return _build(name, 'cifar', num_classes, op='antblock', g=g, placement=placement, reduction=reduction,
                  unstrided_stage=unstrided_stage)


def mobilenet_v2_baseline(dataset: str = 'imagenet', num_classes: int = None, name: str = None) -> NetworkSpec:
    """Same stage table without attention and with g=1.

    The ImageNet variant keeps the published MobileNetV2 structure (no
    expansion at t=1, no projection shortcut); the CIFAR variant shares the
    ANTNet block structure.
    """
    imagenet = dataset == 'imagenet'
    return _build(name or f'mobilenetv2_{dataset}', dataset, num_classes, op='inverted_residual', g=1,
                  placement='none', unstrided_stage='ant2', stage_prefix='ir',
                  expand_t1=not imagenet, projection_shortcut=not imagenet)


def se_mobilenet_v2(dataset: str = 'cifar', num_classes: int = None, name: str = None) -> NetworkSpec:
    """MobileNetV2 blocks with a squeeze-and-excitation unit on the block output (g=1)."""
    return _build(name or f'se_mobilenetv2_{dataset}', dataset, num_classes, op='antblock', g=1,
                  placement='after_projection', unstrided_stage='ant2')


def e_antnet(dataset: str = 'cifar', branch_groups=(1, 2), share_trunk: bool = False, num_classes: int = None,
             name: str = None) -> NetworkSpec:
    """Every ANTNet stage replaced by an e-ANTBlock stage with one branch per group count."""
    if name is None:
        name = f'e_antnet_{dataset}' + ('_shared' if share_trunk else '')
    return _build(name, dataset, num_classes, op='e_antblock', g=1, branch_groups=tuple(branch_groups),
                  share_trunk=share_trunk, unstrided_stage='ant2')


def reduce_spec(spec: NetworkSpec, width: float = 0.25, max_repeats: int = 1, input_shape=None,
                num_classes: int = None, keep_stages=None, name: str = None) -> NetworkSpec:
    """Desk-scale variant: repeats capped, channels scaled, reductions refitted."""
    input_shape = tuple(input_shape or spec.input_shape)
    num_classes = num_classes or spec.num_classes
    stages = []
    c_in = input_shape[0]
    for stage in spec.stages:
        if keep_stages is not None and stage.name not in keep_stages:
            continue
        if stage.op == 'fc':
            stages.append(replace(stage, out_channels=num_classes))
            continue
        if stage.op == 'avgpool':
            stages.append(replace(stage, out_channels=c_in))
            continue
        groups = math.lcm(*stage.branch_groups) if stage.op == 'e_antblock' else stage.g
        c = make_divisible(stage.out_channels * width, math.lcm(4, groups))
        n = min(stage.n, max_repeats)
        r = fit_reduction(stage.r, _attention_widths(stage.placement, c_in, c, stage.t, n)) if stage.r else 0
        stages.append(replace(stage, out_channels=c, n=n, r=r))
        c_in = c
    reduced = replace(spec, name=name or f'{spec.name}_desk', input_shape=input_shape,
                      num_classes=num_classes, stages=tuple(stages))
    validate_spec(reduced)
    return reduced


# ── Validation and planning ─────────────────────────────

def _int_field(value, field, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecParseError(f'expected an integer, got {value!r}', field=field)
    if value < minimum:
        raise SpecParseError(f'must be >= {minimum}, got {value}', field=field)
    return value


def _validate_stage(stage: StageSpec, index: int):
    where = f'stages[{index}]'
    if stage.op not in OPERATORS:
        raise SpecParseError(f'unknown operator {stage.op!r} in stage {stage.name!r}', field=f'{where}.op')
    _int_field(stage.out_channels, f'{where}.out_channels', 1)
    _int_field(stage.n, f'{where}.n', 1)
    _int_field(stage.s, f'{where}.s', 1)
    _int_field(stage.t, f'{where}.t', 1)
    _int_field(stage.r, f'{where}.r', 0)
    _int_field(stage.g, f'{where}.g', 1)
    if stage.placement not in PLACEMENTS:
        raise SpecParseError(f'unknown placement {stage.placement!r} in stage {stage.name!r}',
                             field=f'{where}.placement')
    if stage.op == 'inverted_residual' and (stage.placement != 'none' or stage.g != 1):
        raise SpecParseError(f'stage {stage.name!r}: inverted_residual takes placement none and g=1', field=where)
    if stage.op == 'e_antblock':
        if not stage.branch_groups:
            raise SpecParseError(f'stage {stage.name!r}: e_antblock needs branch_groups', field=f'{where}.branch_groups')
        for j, g in enumerate(stage.branch_groups):
            _int_field(g, f'{where}.branch_groups[{j}]', 1)
    if stage.is_block and stage.placement != 'none' and stage.r < 1:
        raise SpecParseError(f'stage {stage.name!r}: attention placement {stage.placement} needs r >= 1',
                             field=f'{where}.r')


def validate_spec(spec: NetworkSpec) -> NetworkSpec:
    if len(spec.input_shape) != 3:
        raise SpecParseError(f'expected (C, H, W), got {list(spec.input_shape)}', field='input_shape')
    for i, extent in enumerate(spec.input_shape):
        _int_field(extent, f'input_shape[{i}]', 1)
    _int_field(spec.num_classes, 'num_classes', 1)
    if isinstance(spec.alpha, bool) or not isinstance(spec.alpha, (int, float)) or spec.alpha <= 0:
        raise SpecParseError(f'must be a number > 0, got {spec.alpha!r}', field='alpha')
    if spec.attention_activation not in ATTENTION_ACTIVATIONS:
        raise SpecParseError(f'unknown activation {spec.attention_activation!r}', field='attention_activation')
    if not spec.stages:
        raise SpecParseError('a spec needs at least one stage', field='stages')
    for i, stage in enumerate(spec.stages):
        _validate_stage(stage, i)
    plan_layers(spec)
    return spec


def plan_layers(spec: NetworkSpec) -> list:
    """Expand stages into LayerPlans with input/output shapes; raises naming the offending stage."""
    plans = []
    c, h, w = spec.input_shape
    for i, stage in enumerate(spec.stages):
        where = f'stages[{i}]'
        try:
            if plans and plans[-1].op == 'fc':
                raise ConfigurationError('no stage may follow the classifier')
            if stage.op in ('conv2d', 'conv1x1'):
                if h == 1 and w == 1 and plans and plans[-1].op == 'avgpool':
                    raise ConfigurationError('convolution after global pooling')
                k = 3 if stage.op == 'conv2d' else 1
                conv = ConvSpec(c, stage.out_channels, k, stage.s, k // 2, stage.g).validate()
                h2, w2 = conv.output_hw(h, w)
                if h2 < 1 or w2 < 1:
                    raise ConfigurationError(f'spatial size {h}x{w} collapses under stride {stage.s}')
                plans.append(LayerPlan(stage.name, stage.name, stage.op, (c, h, w), (stage.out_channels, h2, w2),
                                       conv=conv))
                c, h, w = stage.out_channels, h2, w2
            elif stage.is_block:
                if stage.s not in (1, 2):
                    raise ConfigurationError(f'block stride must be 1 or 2, got {stage.s}')
                for b in range(stage.n):
                    cfg = BlockConfig(c, stage.out_channels, stage.t, stage.s if b == 0 else 1, stage.g,
                                      stage.r, stage.placement, spec.attention_activation, spec.attention_bias,
                                      spec.expand_t1, spec.projection_shortcut)
                    for g in (stage.branch_groups if stage.op == 'e_antblock' else (stage.g,)):
                        replace(cfg, groups=g).validate()
                    h2, w2 = cfg.output_hw(h, w)
                    plans.append(LayerPlan(f'{stage.name}.{b}', stage.name, stage.op, (c, h, w),
                                           (stage.out_channels, h2, w2), block=cfg,
                                           branch_groups=stage.branch_groups, share_trunk=stage.share_trunk))
                    c, h, w = stage.out_channels, h2, w2
            elif stage.op == 'avgpool':
                if stage.out_channels != c:
                    raise ConfigurationError(f'avgpool keeps {c} channels, spec says {stage.out_channels}')
                plans.append(LayerPlan(stage.name, stage.name, 'avgpool', (c, h, w), (c, 1, 1)))
                h = w = 1
            elif stage.op == 'fc':
                if (h, w) != (1, 1):
                    raise ConfigurationError(f'fc needs a pooled 1x1 map, got {h}x{w}')
                if stage.out_channels != spec.num_classes:
                    raise ConfigurationError(f'fc produces {stage.out_channels} logits, num_classes is {spec.num_classes}')
                plans.append(LayerPlan(stage.name, stage.name, 'fc', (c, 1, 1), (stage.out_channels, 1, 1),
                                       conv=ConvSpec(c, stage.out_channels, 1, bias=True)))
                c = stage.out_channels
        except SpecParseError:
            raise
        except ConfigurationError as exc:
            raise SpecParseError(f'stage {stage.name!r}: {exc}', field=where) from exc
    if not plans or plans[-1].op != 'fc':
        raise SpecParseError('the last stage must be the fc classifier', field='stages')
    return plans


# ── JSON format ─────────────────────────────────────────

_STAGE_DEFAULTS = {'n': 1, 's': 1, 't': 1, 'r': 0, 'g': 1, 'placement': 'none', 'branch_groups': [],
                   'share_trunk': False}
_STAGE_FIELDS = {'name', 'op', 'out_channels', *_STAGE_DEFAULTS}
_TOP_FIELDS = {'name', 'input_shape', 'num_classes', 'alpha', 'stages', 'expand_t1', 'projection_shortcut',
               'attention_bias', 'attention_activation'}


def _line_of(text, needle):
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def _bool_field(value, field):
    if not isinstance(value, bool):
        raise SpecParseError(f'expected true or false, got {value!r}', field=field)
    return value


def parse_spec(text: str) -> NetworkSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecParseError(exc.msg, line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise SpecParseError('a spec document must be a JSON object', line=1)
    for key in ('name', 'input_shape', 'num_classes', 'stages'):
        if key not in data:
            raise SpecParseError('missing required field', field=key)
    unknown = set(data) - _TOP_FIELDS
    if unknown:
        raise SpecParseError(f'unknown fields {sorted(unknown)}', field=sorted(unknown)[0])
    if not isinstance(data['stages'], list) or not isinstance(data['input_shape'], list):
        raise SpecParseError('stages and input_shape must be lists', field='stages')

    stages = []
    for i, raw in enumerate(data['stages']):
        where = f'stages[{i}]'
        if not isinstance(raw, dict):
            raise SpecParseError('each stage must be an object', field=where)
        line = _line_of(text, f'"{raw.get("name")}"') if 'name' in raw else None
        for key in ('op', 'out_channels'):
            if key not in raw:
                raise SpecParseError('missing required field', field=f'{where}.{key}', line=line)
        unknown = set(raw) - _STAGE_FIELDS
        if unknown:
            raise SpecParseError(f'unknown fields {sorted(unknown)}', field=where, line=line)
        values = {**_STAGE_DEFAULTS, **raw}
        if not isinstance(values['branch_groups'], list):
            raise SpecParseError('expected a list', field=f'{where}.branch_groups', line=line)
        stages.append(StageSpec(
            name=str(values.get('name', f'stage{i}')),
            op=values['op'],
            out_channels=values['out_channels'],
            n=values['n'], s=values['s'], t=values['t'], r=values['r'], g=values['g'],
            placement=values['placement'],
            branch_groups=tuple(values['branch_groups']),
            share_trunk=_bool_field(values['share_trunk'], f'{where}.share_trunk'),
        ))

    alpha = data.get('alpha', 1.0)
    spec = NetworkSpec(
        name=str(data['name']),
        input_shape=tuple(data['input_shape']),
        num_classes=data['num_classes'],
        stages=tuple(stages),
        alpha=float(alpha) if isinstance(alpha, int) and not isinstance(alpha, bool) else alpha,
        expand_t1=_bool_field(data.get('expand_t1', True), 'expand_t1'),
        projection_shortcut=_bool_field(data.get('projection_shortcut', True), 'projection_shortcut'),
        attention_bias=_bool_field(data.get('attention_bias', True), 'attention_bias'),
        attention_activation=data.get('attention_activation', 'relu'),
    )
    try:
        validate_spec(spec)
    except SpecParseError as exc:
        if exc.line is not None or not (exc.field or '').startswith('stages['):
            raise
        index = int(exc.field[len('stages['):].split(']')[0])
        line = _line_of(text, f'"{stages[index].name}"')
        raise SpecParseError(str(exc).split(': ', 1)[1], field=exc.field, line=line) from exc
    return spec


def emit_spec(spec: NetworkSpec) -> str:
    """JSON text with one stage per line, in table order."""
    data = spec.to_dict()
    stages = data.pop('stages')
    head = ',\n'.join(f'  {json.dumps(key)}: {json.dumps(value)}' for key, value in data.items())
    rows = ',\n'.join(f'    {json.dumps(stage)}' for stage in stages)
    return f'{{\n{head},\n  "stages": [\n{rows}\n  ]\n}}\n'


def load_spec(path: str) -> NetworkSpec:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_spec(f.read())


def save_spec(spec: NetworkSpec, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(emit_spec(spec))
    return path


def resolve_spec(ref: str) -> NetworkSpec:
    """Load a spec from a path, or from the shipped specs by name."""
    if os.path.isfile(ref):
        return load_spec(ref)
    shipped = os.path.join(Config.SPECS_DIR, ref if ref.endswith('.json') else f'{ref}.json')
    if os.path.isfile(shipped):
        return load_spec(shipped)
    raise SpecParseError(f'no spec file or shipped spec named {ref!r}')


# ── Shipped specs ───────────────────────────────────────

def builtin_specs() -> dict:
    """Every shipped spec fixture, keyed by file stem."""
    cifar_g2 = antnet_cifar(2)
    dws = dict(input_shape=(3, 8, 8), num_classes=10, expand_t1=False, projection_shortcut=False)
    specs = [
        antnet_imagenet(1),
        antnet_imagenet(2),
        antnet_imagenet(1, alpha=1.4, name='antnet_imagenet_a14'),
        antnet_cifar(1),
        antnet_cifar(1, reduction=8),
        antnet_cifar(1, reduction=16),
        antnet_cifar(1, reduction=32),
        cifar_g2,
        mobilenet_v2_baseline('imagenet'),
        mobilenet_v2_baseline('cifar'),
        se_mobilenet_v2('cifar'),
        e_antnet('cifar'),
        e_antnet('imagenet'),
        reduce_spec(cifar_g2, input_shape=(3, 16, 16), num_classes=2, name='antnet_desk_g2'),
        reduce_spec(e_antnet('cifar'), input_shape=(3, 16, 16), num_classes=2, name='e_antnet_desk'),
        reduce_spec(cifar_g2, input_shape=(3, 8, 8), num_classes=3, name='antnet_desk_3block',
                    keep_stages=('conv0', 'ant1', 'ant2', 'ant3', 'conv8', 'pool9', 'fc10')),
        NetworkSpec('dws_noattention_g2', stages=(
            StageSpec('conv0', 'conv2d', 8),
            StageSpec('dws1', 'antblock', 8, n=2, g=2),
            StageSpec('conv8', 'conv1x1', 32),
            StageSpec('pool9', 'avgpool', 32),
            StageSpec('fc10', 'fc', 10),
        ), **dws),
        NetworkSpec('dws_attention_g2', stages=(
            StageSpec('conv0', 'conv2d', 8),
            StageSpec('dws1', 'antblock', 8, n=2, r=4, g=2, placement='between'),
            StageSpec('conv8', 'conv1x1', 32),
            StageSpec('pool9', 'avgpool', 32),
            StageSpec('fc10', 'fc', 10),
        ), **dws),
        NetworkSpec('conv_only', stages=(
            StageSpec('conv0', 'conv2d', 8),
            StageSpec('pool1', 'avgpool', 8),
            StageSpec('fc2', 'fc', 10),
        ), **dws),
    ]
    return {spec.name: validate_spec(spec) for spec in specs}
