"""
Datasets: CIFAR-100 binary ingestion, the synthetic desk-scale set, and the
pad/crop/flip/mean-subtraction augmentation pipeline.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from core.errors import DimensionError, FormatError
from core.tensor import DTYPE

logger = logging.getLogger(__name__)

CIFAR_SIZE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD = 2 + CIFAR_CHANNELS * CIFAR_SIZE * CIFAR_SIZE  # coarse label, fine label, R, G, B planes


@dataclass
class Dataset:
    """N×C×H×W float64 images with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    split: str = 'train'
    num_classes: int = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise DimensionError(f'images {self.images.shape} and labels {self.labels.shape} do not pair up')
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DimensionError(f'labels outside [0, {self.num_classes})')

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, split=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], split or self.split, self.num_classes)

    def to_dict(self):
        return {
            'split': self.split,
            'items': len(self),
            'image_shape': list(self.image_shape),
            'num_classes': self.num_classes,
        }


# ── CIFAR binary ────────────────────────────────────────

def load_cifar_binary(path: str, max_items: int = None, split: str = 'train', num_classes: int = 100) -> Dataset:
    """Read CIFAR-100 records; fine labels are used, pixels scaled to [0, 1]."""
    size = os.path.getsize(path)
    if size % CIFAR_RECORD:
        whole = size // CIFAR_RECORD
        raise FormatError(f'{path}: {size} bytes is not a whole number of {CIFAR_RECORD}-byte records; '
                          f'record {whole} is truncated', offset=whole * CIFAR_RECORD)
    count = size // CIFAR_RECORD
    if max_items is not None:
        count = min(count, max(0, max_items))
    if count == 0:
        empty = np.zeros((0, CIFAR_CHANNELS, CIFAR_SIZE, CIFAR_SIZE), dtype=DTYPE)
        return Dataset(empty, np.zeros(0, dtype=np.int64), split, num_classes)
    raw = np.fromfile(path, dtype=np.uint8, count=count * CIFAR_RECORD).reshape(count, CIFAR_RECORD)
    labels = raw[:, 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise FormatError(f'{path}: fine label {labels[bad[0]]} outside [0, {num_classes})',
                          offset=int(bad[0]) * CIFAR_RECORD + 1)
    images = raw[:, 2:].reshape(count, CIFAR_CHANNELS, CIFAR_SIZE, CIFAR_SIZE).astype(DTYPE) / 255.0
    logger.info('loaded %d %s records from %s', count, split, path)
    return Dataset(images, labels, split, num_classes)


# ── Synthetic set ───────────────────────────────────────

def synth_dataset(classes: int = 2, n_per_class: int = 32, size: int = 16, seed: int = 0, noise: float = 0.05,
                  channels: int = 3, split: str = 'train') -> Dataset:
    """Class-dependent oriented gratings on a class-dependent colour.

    Class k has grating orientation pi·k/classes and a per-channel colour
    offset; the offsets differ between any two classes by more than the
    grating amplitude, so channel means separate the classes when noise is 0.
    """
    if classes < 1 or n_per_class < 0 or size < 1:
        raise ValueError('synth_dataset needs classes >= 1, n_per_class >= 0 and size >= 1')
    rng = np.random.default_rng(seed)
    amplitude = 0.1
    offsets = np.linspace(-0.3, 0.3, classes) if classes > 1 else np.zeros(1)
    signs = np.array([1.0 if c % 2 == 0 else -1.0 for c in range(channels)])
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    images = np.empty((classes * n_per_class, channels, size, size), dtype=DTYPE)
    labels = np.repeat(np.arange(classes), n_per_class)
    for k in range(classes):
        angle = np.pi * k / classes
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        for j in range(n_per_class):
            phase = rng.uniform(0.0, 2 * np.pi)
            grating = amplitude * np.sin(2 * np.pi * proj / 4.0 + phase)
            image = 0.5 + offsets[k] * signs[:, None, None] + grating[None, :, :]
            if noise:
                image = image + noise * rng.standard_normal(image.shape)
            images[k * n_per_class + j] = image
    return Dataset(images, labels, split, classes)


# ── Augmentation ────────────────────────────────────────

def channel_mean(images: np.ndarray) -> np.ndarray:
    return images.mean(axis=(0, 2, 3))


def pad_and_crop(image: np.ndarray, top: int, left: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by pad pixels on each side, then take the original-size window at (top, left)."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, top:top + h, left:left + w]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment(image: np.ndarray, rng: np.random.Generator, mean=None, size: int = CIFAR_SIZE, pad: int = 4) -> np.ndarray:
    """Pad, random crop, flip with probability 0.5, subtract the channel mean."""
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3 or (size is not None and image.shape[1:] != (size, size)):
        raise DimensionError(f'augment expects a C×{size}×{size} image, got shape {image.shape}')
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    out = pad_and_crop(image, int(top), int(left), pad)
    if rng.random() < 0.5:
        out = hflip(out)
    if mean is not None:
        out = out - np.asarray(mean, dtype=DTYPE)[:, None, None]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, mean=None, pad: int = 4) -> np.ndarray:
    return np.stack([augment(image, rng, mean, size=None, pad=pad) for image in images])
