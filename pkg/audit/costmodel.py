"""
Analytic parameter and multiply-add accounting.

One multiply-accumulate is one MAdd. Convolutions and fully connected layers
are counted; pooling, activations, the sigmoid and elementwise products are
not. Batch norm contributes two parameters per channel when counted and no
MAdds. Attention FCs contribute 2·C'²/r weights and as many MAdds (they act
on a pooled 1×1 vector); their biases are counted separately.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, replace

from config import Config
from core.arch import plan_layers, validate_spec
from core.errors import ConfigurationError
from core.tensor import Tensor, count_macs, no_grad
from models import CostConventions, CostReport, CostRow, ConvSpec, NetworkSpec

logger = logging.getLogger(__name__)


# ── Layer costs ─────────────────────────────────────────

def conv_cost(spec: ConvSpec, out_hw) -> tuple:
    """(params, madds); madds = bias-free params · H2 · W2."""
    weights = spec.out_channels * (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
    h2, w2 = out_hw
    params = weights + (spec.out_channels if spec.bias else 0)
    return params, weights * h2 * w2


def attention_cost(c_prime: int, r: int) -> tuple:
    """(params, madds) of the two attention FCs without biases: 2·C'²/r each."""
    if r < 1 or c_prime % r:
        raise ConfigurationError(f'attention channels {c_prime} not divisible by reduction ratio r={r}')
    weights = 2 * c_prime * (c_prime // r)
    return weights, weights


def attention_bias_params(c_prime: int, r: int) -> int:
    return c_prime // r + c_prime


def _conv_rows(name, op, spec, out_shape, conventions):
    params, madds = conv_cost(spec, out_shape[1:])
    rows = [CostRow(name, op, out_shape, params, madds)]
    if conventions.count_bn_params:
        rows.append(CostRow(f'{name}.bn', 'batch_norm', out_shape, 2 * spec.out_channels, 0))
    return rows


def _attention_rows(prefix, width, cfg, conventions):
    if not conventions.count_attention:
        return []
    params, madds = attention_cost(width, cfg.reduction)
    if cfg.attention_bias and conventions.count_attention_bias:
        params += attention_bias_params(width, cfg.reduction)
    return [CostRow(f'{prefix}.attention', 'attention', (width, 1, 1), params, madds)]


def _block_rows(prefix, cfg, in_shape, conventions, *, trunk=True, shortcut=True):
    """Rows of one ANTBlock; trunk=False keeps only the parts a sharing branch owns."""
    _, h, w = in_shape
    h2, w2 = cfg.output_hw(h, w)
    c = cfg.expanded_channels
    rows = []
    if trunk and cfg.placement == 'before_expansion':
        rows += _attention_rows(prefix, cfg.in_channels, cfg, conventions)
    if trunk and cfg.has_expansion:
        rows += _conv_rows(f'{prefix}.expand', 'conv1x1', cfg.expansion_spec(), (c, h, w), conventions)
    if trunk:
        rows += _conv_rows(f'{prefix}.dwise', 'dwconv3x3', cfg.depthwise_spec(), (c, h2, w2), conventions)
    if trunk and cfg.placement == 'between':
        rows += _attention_rows(prefix, c, cfg, conventions)
    project_op = 'gconv1x1' if cfg.groups > 1 else 'conv1x1'
    rows += _conv_rows(f'{prefix}.project', project_op, cfg.projection_spec(), (cfg.out_channels, h2, w2),
                       conventions)
    if trunk and cfg.placement == 'after_projection':
        rows += _attention_rows(prefix, cfg.out_channels, cfg, conventions)
    if shortcut and cfg.has_shortcut:
        rows += _conv_rows(f'{prefix}.shortcut', 'conv1x1', cfg.shortcut_spec(), (cfg.out_channels, h2, w2),
                           conventions)
    return rows


def _ensemble_rows(plan, conventions):
    share = plan.share_trunk or conventions.branch_sharing
    rows = []
    for j, groups in enumerate(plan.branch_groups):
        cfg = replace(plan.block, groups=groups)
        rows += _block_rows(f'{plan.name}.b{j}', cfg, plan.in_shape, conventions,
                            trunk=j == 0 or not share, shortcut=False)
    m = len(plan.branch_groups)
    rows.append(CostRow(f'{plan.name}.lambda', 'lambda', (m,), m, 0))
    cfg = plan.block
    if cfg.has_shortcut:
        rows += _conv_rows(f'{plan.name}.shortcut', 'conv1x1', cfg.shortcut_spec(), plan.out_shape, conventions)
    return rows


def block_cost(cfg, in_hw, conventions: CostConventions = None) -> tuple:
    """(params, madds) of a single ANTBlock on an H×W input."""
    conventions = conventions or CostConventions()
    rows = _block_rows('block', cfg.validate(), (cfg.in_channels, *in_hw), conventions)
    return sum(r.params for r in rows), sum(r.madds for r in rows)


# ── Network costs ───────────────────────────────────────

def network_cost(spec: NetworkSpec, conventions: CostConventions = None) -> CostReport:
    conventions = conventions or CostConventions()
    validate_spec(spec)
    rows = []
    for plan in plan_layers(spec):
        if plan.op in ('conv2d', 'conv1x1'):
            rows += _conv_rows(plan.name, plan.op, plan.conv, plan.out_shape, conventions)
        elif plan.op in ('antblock', 'inverted_residual'):
            rows += _block_rows(plan.name, plan.block, plan.in_shape, conventions)
        elif plan.op == 'e_antblock':
            rows += _ensemble_rows(plan, conventions)
        elif plan.op == 'avgpool':
            rows.append(CostRow(plan.name, 'avgpool', plan.out_shape, 0, 0))
        elif plan.op == 'fc':
            params, madds = conv_cost(plan.conv, (1, 1))
            rows.append(CostRow(plan.name, 'fc', (plan.out_shape[0],), params, madds))
    report = CostReport(spec.name, tuple(rows), conventions)
    logger.debug('%s: %d params, %d madds (%s)', spec.name, report.params, report.madds, conventions.label)
    return report


def attention_increment(spec: NetworkSpec) -> int:
    """Attention FC weights summed over the attention rows of the report."""
    report = network_cost(spec, CostConventions(count_bn_params=False, count_attention_bias=False))
    return sum(row.madds for row in report.rows if row.op == 'attention')


def attention_closed_form(spec: NetworkSpec) -> int:
    """2 · sum over (C', r) block groups of n · C'² / r, read off the stage table."""
    validate_spec(spec)
    counts = Counter()
    c_in = spec.input_shape[0]
    for stage in spec.stages:
        if stage.is_block and stage.placement != 'none':
            branches = 1
            if stage.op == 'e_antblock' and not stage.share_trunk:
                branches = len(stage.branch_groups)
            if stage.placement == 'between':
                first, rest = c_in * stage.t, stage.out_channels * stage.t
            elif stage.placement == 'before_expansion':
                first, rest = c_in, stage.out_channels
            else:
                first = rest = stage.out_channels
            counts[(first, stage.r)] += branches
            counts[(rest, stage.r)] += branches * (stage.n - 1)
        if stage.op not in ('avgpool', 'fc'):
            c_in = stage.out_channels
    return sum(2 * n * c * c // r for (c, r), n in counts.items())


# ── Instrumented oracle ─────────────────────────────────

def empirical_cost_check(network, x) -> int:
    """Per-image multiply-accumulates actually executed by conv2d and FC kernels.

    network is a Network (run in eval mode) or any callable on a Tensor.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    batch = x.shape[0]
    with no_grad(), count_macs() as counter:
        if hasattr(network, 'forward'):
            network.forward(x, training=False)
        else:
            network(x)
    if counter.total % batch:
        raise ConfigurationError(f'counted {counter.total} MACs over a batch of {batch}')
    return counter.total // batch


# ── Comparison ──────────────────────────────────────────

@dataclass(frozen=True)
class ComparisonRow:
    model: str
    dataset: str
    params: int
    madds: int
    computed: bool
    source: str = ''
    published_params: int = None
    published_madds: int = None
    delta_params_pct: float = 0.0
    delta_madds_pct: float = 0.0

    @property
    def audit_params_pct(self):
        return _pct(self.params, self.published_params) if self.published_params else None

    @property
    def audit_madds_pct(self):
        return _pct(self.madds, self.published_madds) if self.published_madds else None

    def to_dict(self):
        return {
            'model': self.model,
            'dataset': self.dataset,
            'params': self.params,
            'madds': self.madds,
            'computed': self.computed,
            'source': self.source,
            'published_params': self.published_params,
            'published_madds': self.published_madds,
            'delta_params_pct': self.delta_params_pct,
            'delta_madds_pct': self.delta_madds_pct,
            'audit_params_pct': self.audit_params_pct,
            'audit_madds_pct': self.audit_madds_pct,
        }


@dataclass(frozen=True)
class Comparison:
    reference: str
    rows: tuple
    conventions: str = 'default'

    def row(self, model):
        for row in self.rows:
            if row.model == model:
                return row
        raise KeyError(model)

    def to_dict(self):
        return {
            'reference': self.reference,
            'conventions': self.conventions,
            'rows': [row.to_dict() for row in self.rows],
        }


def _pct(value, reference):
    return (value - reference) / reference * 100.0


def load_literature(path: str = None) -> list:
    with open(path or Config.LITERATURE_FIXTURE, 'r', encoding='utf-8') as f:
        return json.load(f)['models']


def compare(reports, fixtures=None, reference: str = None, dataset: str = None) -> Comparison:
    """Computed reports side by side with literature rows, deltas against the reference report.

    A fixture whose 'spec' matches a report name supplies that report's
    published budget; the remaining fixtures of the same dataset are listed
    as literature rows.
    """
    reports = list(reports)
    if not reports:
        raise ConfigurationError('compare needs at least one cost report')
    fixtures = list(fixtures or [])
    by_spec = {f['spec']: f for f in fixtures if f.get('spec')}
    ref = reports[0] if reference is None else next((r for r in reports if r.name == reference), None)
    if ref is None:
        raise ConfigurationError(f'reference {reference!r} is not among the compared reports')
    if dataset is None and ref.name in by_spec:
        dataset = by_spec[ref.name]['dataset']

    rows = []
    for report in reports:
        published = by_spec.get(report.name, {})
        rows.append(ComparisonRow(
            model=report.name,
            dataset=published.get('dataset', dataset or ''),
            params=report.params,
            madds=report.madds,
            computed=True,
            source='computed',
            published_params=published.get('params'),
            published_madds=published.get('madds'),
            delta_params_pct=_pct(report.params, ref.params),
            delta_madds_pct=_pct(report.madds, ref.madds),
        ))
    computed = {report.name for report in reports}
    for fixture in fixtures:
        if fixture.get('spec') in computed:
            continue
        if dataset is not None and fixture['dataset'] != dataset:
            continue
        rows.append(ComparisonRow(
            model=fixture['model'],
            dataset=fixture['dataset'],
            params=fixture['params'],
            madds=fixture['madds'],
            computed=False,
            source=fixture.get('source', ''),
            delta_params_pct=_pct(fixture['params'], ref.params),
            delta_madds_pct=_pct(fixture['madds'], ref.madds),
        ))
    return Comparison(ref.name, tuple(rows), ref.conventions.label)
