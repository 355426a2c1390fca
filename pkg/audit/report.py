"""
Report emitters: aligned text through Jinja2 templates, CSV and JSON.
"""

import csv
import io
import json
import logging

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from config import Config
from core.arch import plan_layers
from core.errors import ConfigurationError
from models import CostReport, NetworkSpec, _shape_str

logger = logging.getLogger(__name__)

FORMATS = ('text', 'csv', 'json')
COST_COLUMNS = ('layer', 'op', 'out_shape', 'params', 'madds')
DESCRIBE_COLUMNS = ('name', 'op', 'in_shape', 'out_shape', 't', 'r', 'g', 's', 'n', 'placement')
COMPARE_COLUMNS = ('model', 'dataset', 'params', 'madds', 'delta_params_pct', 'delta_madds_pct',
                   'published_params', 'published_madds', 'source')
_NUMERIC = {'params', 'madds', 't', 'r', 'g', 's', 'n', 'delta_params_pct', 'delta_madds_pct',
            'published_params', 'published_madds'}


def _cell(value):
    if value is None:
        return '-'
    if isinstance(value, float):
        return f'{value:+.2f}'
    return str(value)


def _csv_value(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return f'{value:.4f}'
    return value


class ReportRenderer:
    """Renders reports from dict rows; text goes through templates/table.txt.j2."""

    def __init__(self, templates_dir=None):
        self.env = Environment(
            loader=FileSystemLoader(templates_dir or Config.TEMPLATES_DIR),
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
            undefined=StrictUndefined,
        )

    def table(self, columns, rows, title='', footer=(), template='table.txt.j2'):
        cells = [{key: _cell(row.get(key)) for key in columns} for row in rows]
        layout = []
        for key in columns:
            width = max([len(key)] + [len(row[key]) for row in cells])
            layout.append({'key': key, 'width': width, 'align': 'right' if key in _NUMERIC else 'left'})
        text = self.env.get_template(template).render(
            title=title,
            columns=layout,
            header={key: key for key in columns},
            rule='-' * (sum(col['width'] for col in layout) + 2 * (len(layout) - 1)),
            rows=cells,
            footer=list(footer),
        )
        return '\n'.join(line.rstrip() for line in text.splitlines()) + '\n'

    @staticmethod
    def csv(columns, rows):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_value(row.get(key)) for key in columns])
        return out.getvalue()

    @staticmethod
    def json(data):
        return json.dumps(data, indent=2) + '\n'


_renderer = None


def renderer():
    global _renderer
    if _renderer is None:
        _renderer = ReportRenderer()
    return _renderer


def _check_format(fmt):
    if fmt not in FORMATS:
        raise ConfigurationError(f'unknown format {fmt!r}; expected one of {FORMATS}')


# ── describe ────────────────────────────────────────────

def describe_rows(spec: NetworkSpec, blocks: bool = False) -> list:
    """One row per stage (or per block with blocks=True), in execution order."""
    plans = plan_layers(spec)
    rows = []
    for stage in spec.stages:
        members = [plan for plan in plans if plan.stage == stage.name]
        units = members if blocks else [members[0]]
        for plan in units:
            block = plan.block
            rows.append({
                'name': plan.name if blocks else stage.name,
                'op': stage.op,
                'in_shape': _shape_str(plan.in_shape),
                'out_shape': _shape_str(plan.out_shape if blocks else members[-1].out_shape),
                't': stage.t if stage.is_block else None,
                'r': stage.r if stage.is_block else None,
                'g': '/'.join(map(str, stage.branch_groups)) if stage.op == 'e_antblock' else stage.g,
                's': block.stride if blocks and block is not None else stage.s,
                'n': 1 if blocks else stage.n,
                'placement': stage.placement if stage.is_block else None,
            })
    return rows


def render_describe(spec: NetworkSpec, fmt: str = 'text', blocks: bool = False) -> str:
    _check_format(fmt)
    rows = describe_rows(spec, blocks)
    if fmt == 'csv':
        return ReportRenderer.csv(DESCRIBE_COLUMNS, rows)
    if fmt == 'json':
        return ReportRenderer.json({'name': spec.name, 'input_shape': list(spec.input_shape),
                                    'num_classes': spec.num_classes, 'rows': rows})
    title = f'{spec.name}  input {_shape_str(spec.input_shape)}  classes {spec.num_classes}  alpha {spec.alpha}'
    return renderer().table(DESCRIBE_COLUMNS, rows, title=title)


# ── cost ────────────────────────────────────────────────

def render_cost(report: CostReport, fmt: str = 'text') -> str:
    _check_format(fmt)
    rows = [row.to_dict() for row in report.rows]
    if fmt == 'csv':
        return ReportRenderer.csv(COST_COLUMNS, rows)
    if fmt == 'json':
        return ReportRenderer.json(report.to_dict())
    footer = [f'total params {report.params:,}', f'total madds  {report.madds:,}']
    return renderer().table(COST_COLUMNS, rows, title=f'{report.name}  conventions: {report.conventions.label}',
                            footer=footer)


# ── compare ─────────────────────────────────────────────

def render_comparison(comparison, fmt: str = 'text') -> str:
    _check_format(fmt)
    rows = [row.to_dict() for row in comparison.rows]
    if fmt == 'csv':
        return ReportRenderer.csv(COMPARE_COLUMNS, rows)
    if fmt == 'json':
        return ReportRenderer.json(comparison.to_dict())
    title = f'reference: {comparison.reference}  conventions: {comparison.conventions}'
    footer = []
    for row in comparison.rows:
        if row.computed and row.published_params:
            footer.append(f'{row.model}: {row.audit_params_pct:+.2f}% params, '
                          f'{row.audit_madds_pct:+.2f}% madds against the published budget')
    return renderer().table(COMPARE_COLUMNS, rows, title=title, footer=footer)


# ── fcrf ────────────────────────────────────────────────

def render_verdict(verdict, fmt: str = 'json') -> str:
    _check_format(fmt)
    data = verdict.to_dict()
    if fmt == 'json':
        return ReportRenderer.json(data)
    if fmt == 'csv':
        return ReportRenderer.csv(('fcrf', 'witness', 'matrix_density'), [{
            'fcrf': data['fcrf'],
            'witness': ' '.join(map(str, data['witness'])) if data['witness'] else None,
            'matrix_density': data['matrix_density'],
        }])
    return renderer().env.get_template('verdict.txt.j2').render(verdict=data, shape=verdict.shape)
