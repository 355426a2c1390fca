import functools
import json
import logging
import os
import sys
from dataclasses import replace

import click
import numpy as np

from audit.costmodel import compare, load_literature, network_cost
from audit.fcrf import LAYOUTS, STARTS, check_fcrf, dependency_matrix
from audit.report import FORMATS, render_comparison, render_cost, render_describe, render_verdict
from config import Config
from core.arch import resolve_spec
from core.errors import AntKitError, ConfigurationError, DivergenceError
from core.network import build_network
from core.tensor import Tensor
from harness.checkpoint import save_checkpoint
from harness.data import load_cifar_binary, synth_dataset
from harness.gradcheck import DEFAULT_COORDS, DEFAULT_EPSILON, DEFAULT_TOLERANCE, gradcheck
from harness.trainer import train
from models import PUBLISHED_CONVENTIONS, CommandResult, CostConventions, TrainConfig

logger = logging.getLogger('antkit')

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


# ─── Helpers ───────────────────────────────────────────────

def configure_logging(level=None):
    """One stderr handler on the root logger; standard output stays payload-only."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_antkit', False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('[antkit] %(levelname)s %(name)s: %(message)s'))
    handler._antkit = True
    root.addHandler(handler)
    root.setLevel((level or Config.LOG_LEVEL).upper())
    return handler


def parse_conventions(text: str) -> CostConventions:
    """Comma list of default, published, no-bn, no-attention, no-attention-bias, sharing."""
    conventions = CostConventions()
    for token in (part.strip() for part in (text or 'default').split(',')):
        if token in ('', 'default'):
            continue
        if token == 'published':
            conventions = replace(conventions, count_bn_params=PUBLISHED_CONVENTIONS.count_bn_params,
                                  count_attention_bias=PUBLISHED_CONVENTIONS.count_attention_bias)
        elif token == 'no-bn':
            conventions = replace(conventions, count_bn_params=False)
        elif token == 'no-attention':
            conventions = replace(conventions, count_attention=False)
        elif token == 'no-attention-bias':
            conventions = replace(conventions, count_attention_bias=False)
        elif token == 'sharing':
            conventions = replace(conventions, branch_sharing=True)
        else:
            raise ConfigurationError(f'unknown convention {token!r}')
    return conventions


def _guarded(func):
    """Map input errors to exit 2 with nothing on standard output."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (AntKitError, OSError) as e:
            logger.error('%s', e)
            return CommandResult(EXIT_USAGE)
    return wrapper


# ─── Commands ──────────────────────────────────────────────

@_guarded
def cmd_describe(spec_ref, blocks=False, fmt='text'):
    spec = resolve_spec(spec_ref)
    return CommandResult(EXIT_OK, render_describe(spec, fmt, blocks))


@_guarded
def cmd_cost(spec_ref, conventions='default', fmt='text'):
    spec = resolve_spec(spec_ref)
    report = network_cost(spec, parse_conventions(conventions))
    return CommandResult(EXIT_OK, render_cost(report, fmt))


@_guarded
def cmd_compare(spec_refs, reference=None, conventions='published', fmt='text'):
    if not spec_refs:
        raise ConfigurationError('compare needs at least one spec')
    parsed = parse_conventions(conventions)
    reports = [network_cost(resolve_spec(ref), parsed) for ref in spec_refs]
    if reference is not None and os.path.isfile(reference):
        reference = resolve_spec(reference).name
    comparison = compare(reports, load_literature(), reference)
    return CommandResult(EXIT_OK, render_comparison(comparison, fmt))


@_guarded
def cmd_fcrf(spec_ref, start='input', grid=None, fmt='json', layout='contiguous'):
    """Exit 0 when the analyzed range has a full channel receptive field, 1 with a witness otherwise."""
    spec = resolve_spec(spec_ref)
    verdict = check_fcrf(spec, start, layout)
    if grid:
        with open(grid, 'w', encoding='utf-8') as f:
            f.write(dependency_matrix(spec, start, layout).to_grid())
    if not verdict.fcrf:
        logger.warning('%s: output channel %d does not depend on input channel %d', spec.name, *verdict.witness)
    return CommandResult(EXIT_OK if verdict.fcrf else EXIT_FAILED, render_verdict(verdict, fmt))


@_guarded
def cmd_gradcheck(spec_ref, seed=0, eps=DEFAULT_EPSILON, coords=DEFAULT_COORDS, batch=2, tol=DEFAULT_TOLERANCE):
    spec = resolve_spec(spec_ref)
    network = build_network(spec, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, *spec.input_shape)))
    result = gradcheck(network, x, eps, coords=coords, seed=seed)
    payload = dict(result.to_dict(), tolerance=tol, passed=result.passed(tol))
    return CommandResult(EXIT_OK if result.passed(tol) else EXIT_FAILED, json.dumps(payload, indent=2) + '\n')


def _training_data(spec, synth, data_dir, max_items, per_class, seed):
    if synth:
        c, h, w = spec.input_shape
        if h != w:
            raise ConfigurationError(f'synthetic images are square, {spec.name} expects {h}x{w}')
        data = synth_dataset(spec.num_classes, per_class, h, seed, channels=c)
        return data, None
    data_dir = data_dir or Config.DATA_DIR
    train_set = load_cifar_binary(os.path.join(data_dir, Config.CIFAR_TRAIN_FILE), max_items, 'train',
                                  spec.num_classes)
    test_path = os.path.join(data_dir, Config.CIFAR_TEST_FILE)
    test_set = None
    if os.path.isfile(test_path):
        test_set = load_cifar_binary(test_path, max_items, 'test', spec.num_classes)
    return train_set, test_set


def default_augment(spec, synth: bool) -> bool:
    """Pad/crop and flip are on for real CIFAR-shaped data unless the caller says otherwise."""
    return not synth and tuple(spec.input_shape[1:]) == (32, 32)


@_guarded
def cmd_train(spec_ref, synth=False, data_dir=None, max_items=None, per_class=32, overrides=None, history=None,
              checkpoint=None, target_acc=None):
    """Train and emit the history CSV; with target_acc, exit 1 unless some epoch reaches it."""
    spec = resolve_spec(spec_ref)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    overrides.setdefault('augment', default_augment(spec, synth))
    cfg = replace(TrainConfig(), **overrides).validate()
    logger.debug('training %s with %s', spec.name, cfg)
    dataset, eval_set = _training_data(spec, synth, data_dir, max_items, per_class, cfg.seed)
    network = build_network(spec, cfg.seed)

    def reached(record):
        return target_acc is not None and record.train_acc >= target_acc

    try:
        result = train(network, dataset, cfg, eval_set, on_epoch=reached)
    except DivergenceError as e:
        logger.error('%s', e)
        return CommandResult(EXIT_FAILED)
    if history:
        result.write_csv(history)
    if checkpoint:
        save_checkpoint(network, checkpoint)
    ok = target_acc is None or result.best_train_acc >= target_acc
    if not ok:
        logger.warning('best train accuracy %.4f below target %.4f', result.best_train_acc, target_acc)
    return CommandResult(EXIT_OK if ok else EXIT_FAILED, result.to_csv())


# ─── CLI ───────────────────────────────────────────────────

def _finish(result: CommandResult):
    if result.payload:
        click.echo(result.payload, nl=False)
    sys.exit(result.exit_code)


@click.group()
@click.option('--log-level', default=None, help='Logging level for stderr diagnostics (env ANTKIT_LOG_LEVEL).')
@click.pass_context
def cli(ctx, log_level):
    """Build, audit and train ANTNet-family networks from JSON specs."""
    handler = configure_logging(log_level)
    ctx.call_on_close(lambda: logging.getLogger().removeHandler(handler))


@cli.command()
@click.argument('spec')
@click.option('--blocks', is_flag=True, help='One row per block instead of per stage.')
@click.option('--format', 'fmt', type=click.Choice(FORMATS), default='text')
def describe(spec, blocks, fmt):
    """Layer table of SPEC (a path or a shipped spec name)."""
    _finish(cmd_describe(spec, blocks, fmt))


@cli.command()
@click.argument('spec')
@click.option('--conventions', default='default',
              help='Comma list: default, published, no-bn, no-attention, no-attention-bias, sharing.')
@click.option('--format', 'fmt', type=click.Choice(FORMATS), default='text')
def cost(spec, conventions, fmt):
    """Per-layer params and MAdds of SPEC."""
    _finish(cmd_cost(spec, conventions, fmt))


@cli.command('compare')
@click.argument('specs', nargs=-1, required=True)
@click.option('--reference', default=None, help='Spec name the deltas are taken against (default: the first).')
@click.option('--conventions', default='published')
@click.option('--format', 'fmt', type=click.Choice(FORMATS), default='text')
def compare_command(specs, reference, conventions, fmt):
    """Budgets of SPECS side by side with the literature fixtures."""
    _finish(cmd_compare(list(specs), reference, conventions, fmt))


@cli.command()
@click.argument('spec')
@click.option('--start', type=click.Choice(STARTS), default='input')
@click.option('--layout', type=click.Choice(LAYOUTS), default='contiguous')
@click.option('--grid', type=click.Path(dir_okay=False), default=None, help='Write the 0/1 dependency matrix here.')
@click.option('--format', 'fmt', type=click.Choice(FORMATS), default='json')
def fcrf(spec, start, layout, grid, fmt):
    """Full channel receptive field verdict for SPEC."""
    _finish(cmd_fcrf(spec, start, grid, fmt, layout))


@cli.command('gradcheck')
@click.argument('spec')
@click.option('--seed', type=int, default=Config.DEFAULT_SEED)
@click.option('--eps', type=float, default=DEFAULT_EPSILON)
@click.option('--coords', type=int, default=DEFAULT_COORDS)
@click.option('--batch', type=int, default=2)
@click.option('--tol', type=float, default=DEFAULT_TOLERANCE)
def gradcheck_command(spec, seed, eps, coords, batch, tol):
    """Central-difference check of SPEC's gradients; exit 0 iff max_rel_err < tol."""
    _finish(cmd_gradcheck(spec, seed, eps, coords, batch, tol))


@cli.command('train')
@click.argument('spec')
@click.option('--synth', is_flag=True, help='Train on the synthetic grating set.')
@click.option('--data-dir', type=click.Path(file_okay=False), default=None, help='CIFAR binary directory.')
@click.option('--max-items', type=int, default=None)
@click.option('--per-class', type=int, default=32, help='Synthetic images per class.')
@click.option('--epochs', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--momentum', type=float, default=None)
@click.option('--weight-decay', type=float, default=None)
@click.option('--gamma', type=float, default=None)
@click.option('--milestones', default=None, help='Comma list of epochs.')
@click.option('--seed', type=int, default=Config.DEFAULT_SEED)
@click.option('--nesterov/--no-nesterov', default=None)
@click.option('--shuffle/--no-shuffle', default=None)
@click.option('--augment/--no-augment', default=None,
              help='Pad/crop and flip augmentation. Defaults to on for real 32x32 CIFAR data, off for --synth.')
@click.option('--history', type=click.Path(dir_okay=False), default=None)
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None)
@click.option('--target-acc', type=float, default=None)
def train_command(spec, synth, data_dir, max_items, per_class, epochs, lr, batch_size, momentum, weight_decay,
                  gamma, milestones, seed, nesterov, shuffle, augment, history, checkpoint, target_acc):
    """Train SPEC with SGD; prints the history CSV."""
    try:
        milestones = tuple(int(m) for m in milestones.split(',') if m.strip()) if milestones else None
    except ValueError:
        raise click.BadParameter(f'expected comma-separated epochs, got {milestones!r}', param_hint='--milestones')
    overrides = {
        'max_epochs': epochs,
        'lr_init': lr,
        'batch_size': batch_size,
        'momentum': momentum,
        'weight_decay': weight_decay,
        'lr_gamma': gamma,
        'milestones': milestones,
        'seed': seed,
        'nesterov': nesterov,
        'shuffle': shuffle,
        'augment': augment,
    }
    _finish(cmd_train(spec, synth, data_dir, max_items, per_class, overrides, history, checkpoint, target_acc))


if __name__ == '__main__':
    cli()
