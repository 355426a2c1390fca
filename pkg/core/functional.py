"""
Network operations over Tensors: convolution, activations, pooling, fully
connected layers, batch normalization, softmax and the training loss.

All kernels run in float64. conv2d and fully_connected switch to explicit
per-output dot products while a count_macs() context is open.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from core.errors import DegenerateBatchError, DimensionError
from core.tensor import (
    DTYPE,
    Function,
    Tensor,
    active_mac_counter,
    record_region,
    regions_recording,
)
from models import ConvSpec

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


# ── Convolution ─────────────────────────────────────────

def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Unfold a padded N×C×H×W map into N × (C·K·K) × (H2·W2) patch columns."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kernel, kernel, out_h, out_w),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return patches.reshape(n, c * kernel * kernel, out_h * out_w)


def col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add patch columns back onto the (unpadded) input map."""
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, kernel, kernel, out_h, out_w)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return padded[:, :, padding:padding + h, padding:padding + w]


def _conv2d_counted(xp, weight, spec, out_h, out_w, counter):
    n = xp.shape[0]
    k, s = spec.kernel, spec.stride
    cin_g = spec.in_channels // spec.groups
    cout_g = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, out_h, out_w), dtype=DTYPE)
    for b in range(n):
        for o in range(spec.out_channels):
            q = o // cout_g
            kernel_vec = weight[o].ravel()
            for y in range(out_h):
                for x in range(out_w):
                    patch = xp[b, q * cin_g:(q + 1) * cin_g, y * s:y * s + k, x * s:x * s + k].ravel()
                    out[b, o, y, x] = np.dot(kernel_vec, patch)
                    counter.add('conv2d', patch.size)
    return out


class Conv2d(Function):
    def forward(self, x, weight, bias=None, *, spec: ConvSpec):
        self.spec = spec
        self.x_shape = x.shape
        self.weight = weight
        n = x.shape[0]
        g, k = spec.groups, spec.kernel
        out_h = output_size(x.shape[2], k, spec.stride, spec.padding)
        out_w = output_size(x.shape[3], k, spec.stride, spec.padding)
        self.out_hw = (out_h, out_w)
        xp = _pad(x, spec.padding)
        cols = im2col(xp, k, spec.stride, out_h, out_w)
        self.cols = cols.reshape(n, g, -1, out_h * out_w)

        counter = active_mac_counter()
        if counter is not None:
            out = _conv2d_counted(xp, weight, spec, out_h, out_w, counter)
        else:
            w = weight.reshape(g, spec.out_channels // g, -1)
            out = np.matmul(w[None], self.cols).reshape(n, spec.out_channels, out_h, out_w)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        spec = self.spec
        n, g, _, length = self.cols.shape
        out_h, out_w = self.out_hw
        go = grad.reshape(n, g, spec.out_channels // g, length)
        w = self.weight.reshape(g, spec.out_channels // g, -1)
        dw = np.matmul(go, self.cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(self.weight.shape)
        dcols = np.matmul(w.transpose(0, 2, 1)[None], go)
        dx = col2im(dcols.reshape(n, -1, length), self.x_shape, spec.kernel, spec.stride, spec.padding,
                    out_h, out_w)
        if len(self.tensors) == 3:
            return dx, dw, grad.sum(axis=(0, 2, 3))
        return dx, dw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, spec: ConvSpec = None) -> Tensor:
    """Grouped 2-D convolution; without a spec, stride 1, no padding, groups inferred from the kernel."""
    if x.ndim != 4:
        raise DimensionError(f'conv2d expects an N×C×H×W input, got shape {x.shape}')
    if weight.ndim != 4:
        raise DimensionError(f'conv2d expects a Cout×Cin/g×K×K kernel, got shape {weight.shape}')
    if spec is None:
        c_out, cin_g, k, _ = weight.shape
        if x.shape[1] % cin_g:
            raise DimensionError(f'input channels {x.shape[1]} do not tile kernel depth {cin_g}')
        spec = ConvSpec(x.shape[1], c_out, k, 1, 0, x.shape[1] // cin_g, bias is not None)
    spec.validate()
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f'conv2d input has {x.shape[1]} channels, spec expects {spec.in_channels}')
    if weight.shape != spec.weight_shape:
        raise DimensionError(f'conv2d kernel shape {weight.shape} != expected {spec.weight_shape}')
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f'conv2d bias shape {bias.shape} != ({spec.out_channels},)')
    out_h, out_w = spec.output_hw(x.shape[2], x.shape[3])
    if out_h < 1 or out_w < 1:
        raise DimensionError(f'conv2d output would be empty for input {x.shape[2]}x{x.shape[3]}')
    if bias is None:
        return Conv2d.apply(x, weight, spec=spec)
    return Conv2d.apply(x, weight, bias, spec=spec)


# ── Activations ─────────────────────────────────────────

class ReLU6(Function):
    def forward(self, x):
        self.mask = (x > 0.0) & (x < 6.0)
        if regions_recording():
            record_region((x > 0.0).astype(np.int8) + (x >= 6.0))
        return np.clip(x, 0.0, 6.0)

    def backward(self, grad):
        # kinks at 0 and 6 get gradient 0
        return grad * self.mask


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0.0
        if regions_recording():
            record_region(self.mask.astype(np.int8))
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return grad * self.mask


class Sigmoid(Function):
    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


def relu6(x: Tensor) -> Tensor:
    return ReLU6.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# ── Pooling and fully connected ─────────────────────────

class GlobalAvgPool(Function):
    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        h, w = self.x_shape[2:]
        return np.broadcast_to(grad / (h * w), self.x_shape)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f'global_avg_pool expects an N×C×H×W input, got shape {x.shape}')
    return GlobalAvgPool.apply(x)


class Linear(Function):
    def forward(self, x, weight, bias=None):
        self.x, self.weight = x, weight
        counter = active_mac_counter()
        if counter is not None:
            out = np.zeros((x.shape[0], weight.shape[0]), dtype=DTYPE)
            for n in range(x.shape[0]):
                for o in range(weight.shape[0]):
                    out[n, o] = np.dot(x[n], weight[o])
                    counter.add('fully_connected', x.shape[1])
        else:
            out = x @ weight.T
        if bias is not None:
            out = out + bias
        return out

    def backward(self, grad):
        dx = grad @ self.weight
        dw = grad.T @ self.x
        if len(self.tensors) == 3:
            return dx, dw, grad.sum(axis=0)
        return dx, dw


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f'fully_connected: input {x.shape} does not match weight {weight.shape}')
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f'fully_connected: bias {bias.shape} does not match weight {weight.shape}')
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


# ── Batch normalization ─────────────────────────────────

@dataclass
class RunningStats:
    """Per-channel running mean/variance, the only mutable state a forward pass touches."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> 'RunningStats':
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


class BatchNorm2d(Function):
    _axes = (0, 2, 3)

    def forward(self, x, gamma, beta, *, mean, var, training):
        self.training = training
        self.gamma = gamma
        self.count = x.shape[0] * x.shape[2] * x.shape[3]
        self.inv_std = (1.0 / np.sqrt(var + BN_EPSILON)).reshape(1, -1, 1, 1)
        self.xhat = (x - mean.reshape(1, -1, 1, 1)) * self.inv_std
        return gamma.reshape(1, -1, 1, 1) * self.xhat + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        dgamma = (grad * self.xhat).sum(axis=self._axes)
        dbeta = grad.sum(axis=self._axes)
        dxhat = grad * self.gamma.reshape(1, -1, 1, 1)
        if self.training:
            m = self.count
            dx = self.inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=self._axes, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=self._axes, keepdims=True)
            )
        else:
            dx = dxhat * self.inv_std
        return dx, dgamma, dbeta


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats, mode: str = 'train') -> Tensor:
    """Train mode normalizes with batch moments and updates running_stats; eval uses running_stats."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f'batch_norm: input {x.shape} does not match gamma {gamma.shape} / beta {beta.shape}')
    if mode == 'train':
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DegenerateBatchError(f'batch_norm in train mode needs N·H·W >= 2, got {count}')
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = running_stats.momentum
        running_stats.mean = (1.0 - m) * running_stats.mean + m * mean
        running_stats.var = (1.0 - m) * running_stats.var + m * var * count / (count - 1)
        return BatchNorm2d.apply(x, gamma, beta, mean=mean, var=var, training=True)
    if mode == 'eval':
        return BatchNorm2d.apply(x, gamma, beta, mean=running_stats.mean, var=running_stats.var, training=False)
    raise ValueError(f'batch_norm mode must be train or eval, got {mode!r}')


# ── Softmax and loss ────────────────────────────────────

class Softmax(Function):
    def forward(self, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        return self.out * (grad - (grad * self.out).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return Softmax.apply(x)


class CrossEntropy(Function):
    def forward(self, logits, *, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(log_probs)
        self.labels = labels
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_probs[rows, labels].mean())

    def backward(self, grad):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return d * (grad / n)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of N×K logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f'cross_entropy: logits {logits.shape} vs labels {labels.shape}')
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError(f'cross_entropy: labels outside [0, {logits.shape[1]})')
    return CrossEntropy.apply(logits, labels=labels)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
