"""
Training loop: seeded shuffling, optional augmentation, SGD with Nesterov
momentum on the multi-step schedule, softmax cross-entropy loss.
"""

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from core import functional as F
from core.errors import ConfigurationError, DimensionError, DivergenceError
from core.tensor import Tensor, no_grad
from harness.data import Dataset, augment_batch, channel_mean
from harness.optim import SGD, lr_schedule
from models import TrainConfig

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ('epoch', 'lr', 'loss', 'train_acc', 'eval_acc')


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    eval_acc: float = None

    def to_dict(self):
        return {
            'epoch': self.epoch,
            'lr': self.lr,
            'loss': self.loss,
            'train_acc': self.train_acc,
            'eval_acc': self.eval_acc,
        }


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        if self.rows and record.epoch <= self.rows[-1].epoch:
            raise ValueError(f'epoch {record.epoch} does not follow epoch {self.rows[-1].epoch}')
        self.rows.append(record)

    @property
    def final(self):
        return self.rows[-1] if self.rows else None

    @property
    def best_train_acc(self):
        return max((row.train_acc for row in self.rows), default=0.0)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(HISTORY_COLUMNS)
        for row in self.rows:
            writer.writerow([row.epoch, repr(row.lr), repr(row.loss), repr(row.train_acc),
                             '' if row.eval_acc is None else repr(row.eval_acc)])
        return out.getvalue()

    def write_csv(self, path: str) -> str:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(self.to_csv())
        return path

    def to_dict(self):
        return {'rows': [row.to_dict() for row in self.rows]}


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(network, dataset: Dataset, batch_size: int = 128, mean=None) -> float:
    """Eval-mode accuracy over the whole dataset."""
    if not len(dataset):
        return 0.0
    correct = 0
    with no_grad():
        for idx in _batches(len(dataset), batch_size, np.arange(len(dataset))):
            images = dataset.images[idx]
            if mean is not None:
                images = images - mean[None, :, None, None]
            logits = network.forward(Tensor(images), training=False)
            correct += int((logits.data.argmax(axis=1) == dataset.labels[idx]).sum())
    return correct / len(dataset)


def train(network, dataset: Dataset, cfg: TrainConfig, eval_dataset: Dataset = None, on_epoch=None) -> History:
    """Run cfg.max_epochs epochs; on_epoch(record) may return True to stop early."""
    cfg.validate()
    if not len(dataset):
        raise ConfigurationError('cannot train on an empty dataset')
    if dataset.image_shape != tuple(network.spec.input_shape):
        raise DimensionError(f'dataset images {dataset.image_shape} do not fit {network.spec.name} '
                             f'input {tuple(network.spec.input_shape)}')
    if dataset.num_classes > network.spec.num_classes:
        raise DimensionError(f'{dataset.num_classes} classes in the data, {network.spec.num_classes} logits')

    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD(network.parameters(), cfg)
    mean = channel_mean(dataset.images) if cfg.augment else None
    history = History()
    n = len(dataset)
    logger.info('training %s on %d images for %d epochs', network.spec.name, n, cfg.max_epochs)

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        network.train()
        total_loss = 0.0
        correct = 0
        for idx in _batches(n, cfg.batch_size, order):
            images = dataset.images[idx]
            labels = dataset.labels[idx]
            if cfg.augment:
                images = augment_batch(images, rng, mean)
            x = Tensor(images)
            optimizer.zero_grad()
            logits = network.forward(x, training=True)
            loss = F.cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                layer = network.first_nonfinite_unit(x, training=True) or 'loss'
                raise DivergenceError(f'non-finite loss {value} at epoch {epoch}; first non-finite output in {layer}',
                                      layer=layer)
            loss.backward()
            optimizer.step(lr)
            total_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())

        eval_acc = evaluate(network, eval_dataset, cfg.batch_size, mean) if eval_dataset is not None else None
        record = EpochRecord(epoch, lr, total_loss / n, correct / n, eval_acc)
        history.append(record)
        logger.info('epoch %d lr %.6g loss %.6f train_acc %.4f%s', epoch, lr, record.loss, record.train_acc,
                    '' if eval_acc is None else f' eval_acc {eval_acc:.4f}')
        if on_epoch is not None and on_epoch(record):
            break
    return history
