"""
Reverse-mode autograd over float64 numpy arrays.

A Tensor wraps a read-only array. Every Function records itself as the
creator of its output while grad mode is on; Tensor.backward() walks that
record in reverse topological order and accumulates into leaf gradients.
Recording state is thread-local, so independent graphs may run on separate
threads.
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np

from core.errors import DimensionError, GraphStateError

logger = logging.getLogger(__name__)

DTYPE = np.float64


class _LocalState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.mac_counter = None
        self.regions = None


_state = _LocalState()


# ── Instrumentation ─────────────────────────────────────

class MacCounter:
    """Multiply-accumulate tally filled by the instrumented kernels."""

    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op: str, count: int):
        self.total += int(count)
        self.by_op[op] = self.by_op.get(op, 0) + int(count)


@contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def count_macs():
    """Route conv2d and fully_connected through their counted kernels.

    Yields a MacCounter; every dot product executed while the context is
    open adds its length to the counter.
    """
    counter = MacCounter()
    previous = _state.mac_counter
    _state.mac_counter = counter
    try:
        yield counter
    finally:
        _state.mac_counter = previous


def active_mac_counter():
    return _state.mac_counter


@contextmanager
def record_activation_regions():
    """Collect, in call order, the kink region of every ReLU/ReLU6 element."""
    regions = []
    previous = _state.regions
    _state.regions = regions
    try:
        yield regions
    finally:
        _state.regions = previous


def regions_recording() -> bool:
    return _state.regions is not None


def record_region(region: np.ndarray):
    if _state.regions is not None:
        _state.regions.append(region)


# ── Graph nodes ─────────────────────────────────────────

class Function:
    """
    Base class for differentiable operations.

    forward() receives the raw arrays of the input tensors and returns the
    output array; backward() receives dL/d(output) and returns one gradient
    (or None) per input tensor, in input order.
    """

    def __init__(self, *tensors: 'Tensor'):
        self.tensors = tensors

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError(f'{type(self).__name__}.forward')

    def backward(self, grad: np.ndarray):
        raise NotImplementedError(f'{type(self).__name__}.backward')

    @classmethod
    def apply(cls, *tensors: 'Tensor', **kwargs) -> 'Tensor':
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _state.grad_enabled and any(t.requires_grad for t in tensors)
        if not requires_grad:
            func = None
        return Tensor(out, requires_grad=requires_grad, creator=func, copy=False)

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape) -> np.ndarray:
        """Sum out the axes numpy broadcasting added so grad matches to_shape."""
        if grad.shape == tuple(to_shape):
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """Immutable float64 value with an optional recorded creator."""

    def __init__(self, data, requires_grad: bool = False, creator: Function = None, copy: bool = True):
        array = np.array(data, dtype=DTYPE) if copy else np.asarray(data, dtype=DTYPE)
        if any(extent < 1 for extent in array.shape):
            raise DimensionError(f'tensor extents must be >= 1, got shape {array.shape}')
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def detach(self) -> 'Tensor':
        return Tensor(self._data, copy=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    # ── Backward ────────────────────────────────────────

    def backward(self, grad=None):
        if self.creator is None:
            raise GraphStateError(
                'backward() needs a recorded forward graph; run the forward pass with grad enabled first')
        if grad is None:
            if self.size != 1:
                raise GraphStateError(f'backward() without a seed gradient needs a scalar output, got shape {self.shape}')
            grad = np.ones_like(self._data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise DimensionError(f'seed gradient shape {grad.shape} does not match output shape {self.shape}')

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        pending = {id(self): grad}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node.creator is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            input_grads = node.creator.backward(node_grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for parent, parent_grad in zip(node.creator.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

        # A graph is consumed by one backward pass.
        for node in order:
            node.creator = None
        logger.debug('backward over %d nodes', len(order))

    # ── Elementwise and structural ops ──────────────────

    def __add__(self, other):
        return Add.apply(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return Mul.apply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return Mul.apply(self, Tensor(-1.0))

    def __sub__(self, other):
        return Add.apply(self, -_as_tensor(other))

    def __getitem__(self, index: int):
        return Select.apply(self, index=index)

    def sum(self):
        return Sum.apply(self)

    def mean(self):
        return Sum.apply(self) * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


class Parameter(Tensor):
    """Trainable leaf tensor owned by a layer.

    decay marks the tensors the optimizer applies weight decay to (conv and
    FC weights); BN affine terms and biases leave it off.
    """

    def __init__(self, data, name: str = '', decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay = decay

    def assign(self, value: np.ndarray):
        value = np.array(value, dtype=DTYPE)
        if value.shape != self.shape:
            raise DimensionError(f'{self.name or "parameter"}: cannot assign shape {value.shape} to {self.shape}')
        value.setflags(write=False)
        self._data = value

    def __repr__(self):
        return f'Parameter({self.name!r}, shape={self.shape})'


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Add(Function):
    def forward(self, a, b):
        self.a_shape, self.b_shape = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.a_shape), self.unbroadcast(grad, self.b_shape)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return self.unbroadcast(grad * self.b, self.a.shape), self.unbroadcast(grad * self.a, self.b.shape)


class Sum(Function):
    def forward(self, x):
        self.x_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return np.broadcast_to(grad, self.x_shape)


class Reshape(Function):
    def forward(self, x, shape):
        self.x_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.x_shape)


class Select(Function):
    """One entry along the leading axis."""

    def forward(self, x, index):
        self.x_shape = x.shape
        self.index = index
        return np.asarray(x[index])

    def backward(self, grad):
        out = np.zeros(self.x_shape, dtype=DTYPE)
        out[self.index] = grad
        return out
