"""
Central-difference gradient checking against reverse-mode gradients.

Coordinates whose ± perturbation moves any ReLU/ReLU6 input across a kink
are skipped and replaced by the next sampled coordinate.
"""

import logging
from dataclasses import dataclass

import numpy as np

from core import functional as F
from core.errors import ConfigurationError
from core.tensor import Tensor, no_grad, record_activation_regions

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DEFAULT_COORDS = 200
DEFAULT_TOLERANCE = 1e-4
REL_FLOOR = 1e-6


@dataclass(frozen=True)
class GradcheckResult:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    checked: int
    skipped: int

    def passed(self, tol: float = DEFAULT_TOLERANCE) -> bool:
        return self.checked > 0 and self.max_rel_err < tol

    def to_dict(self):
        return {
            'max_rel_err': self.max_rel_err,
            'worst_param': self.worst_param,
            'worst_index': list(self.worst_index) if self.worst_index is not None else None,
            'checked': self.checked,
            'skipped': self.skipped,
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def _same_regions(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _snapshot(buffers):
    return [(stats, attr, getattr(stats, attr).copy()) for _, stats, attr in buffers]


def _restore(snapshot):
    for stats, attr, value in snapshot:
        setattr(stats, attr, value)


def check_gradients(loss_fn, named_parameters, epsilon: float = DEFAULT_EPSILON, coords: int = DEFAULT_COORDS,
                    seed: int = 0, always=(), buffers=()) -> GradcheckResult:
    """Compare backward() of loss_fn() with central differences.

    named_parameters: (name, Parameter) pairs to check. Up to coords sampled
    coordinates are checked, plus every coordinate of the parameters whose
    names appear in always. buffers: BN (name, stats, attr) entries restored
    after every forward pass.
    """
    named = list(named_parameters)
    if not named:
        raise ConfigurationError('gradient check needs at least one parameter')
    snapshot = _snapshot(buffers)

    for _, param in named:
        param.zero_grad()
    with record_activation_regions() as base_regions:
        loss = loss_fn()
    if loss.size != 1:
        raise ConfigurationError(f'loss must be a scalar, got shape {loss.shape}')
    loss.backward()
    _restore(snapshot)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for _, p in named]

    rng = np.random.default_rng(seed)
    pool = [(k, i) for k, (_, p) in enumerate(named) for i in range(p.size)]
    order = rng.permutation(len(pool))
    forced = [(k, i) for k, (name, p) in enumerate(named) if name in always for i in range(p.size)]
    forced_set = set(forced)

    def nudged_loss(k, i, original, delta):
        param = named[k][1]
        value = original.copy()
        value.flat[i] += delta
        param.assign(value)
        with no_grad(), record_activation_regions() as regions:
            out = loss_fn().item()
        _restore(snapshot)
        return out, regions

    worst = (0.0, None, None)
    checked = skipped = sampled = 0
    candidates = forced + [pool[j] for j in order if pool[j] not in forced_set]
    for k, i in candidates:
        is_forced = (k, i) in forced_set
        if not is_forced and sampled >= coords:
            break
        param = named[k][1]
        original = param.data.copy()
        plus, regions_plus = nudged_loss(k, i, original, epsilon)
        minus, regions_minus = nudged_loss(k, i, original, -epsilon)
        param.assign(original)
        if not (_same_regions(base_regions, regions_plus) and _same_regions(base_regions, regions_minus)):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * epsilon)
        err = relative_error(float(analytic[k].flat[i]), numeric)
        checked += 1
        if not is_forced:
            sampled += 1
        if err > worst[0] or worst[1] is None:
            worst = (err, named[k][0], np.unravel_index(i, param.shape))

    err, name, index = worst
    result = GradcheckResult(err, name, tuple(int(v) for v in index) if index is not None else None,
                             checked, skipped)
    logger.info('gradcheck: %d coordinates, %d skipped at kinks, max rel err %.3e in %s',
                checked, skipped, err, name)
    return result


def gradcheck(network, x, epsilon: float = DEFAULT_EPSILON, labels=None, coords: int = DEFAULT_COORDS,
              seed: int = 0) -> GradcheckResult:
    """Check a Network's train-mode cross-entropy gradients; every e-ANT logit is always checked."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if labels is None:
        labels = np.random.default_rng(seed).integers(0, network.spec.num_classes, size=x.shape[0])

    def loss_fn():
        return F.cross_entropy(network.forward(x, training=True), labels)

    always = {param.name for param in network.lambdas()}
    return check_gradients(loss_fn, network.named_parameters(), epsilon, coords, seed, always,
                           network.named_buffers())
