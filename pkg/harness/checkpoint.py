"""
Single-file model checkpoints.

Layout, all little-endian:
    magic b'ANTKIT\\0', uint32 version, uint32 spec length, spec JSON (UTF-8),
    uint32 tensor count, then per tensor: uint32 ndim, ndim × uint32 dims,
    float64 data in C order.
Tensors are the parameters in declaration order followed by the BN running
statistics (mean then var per layer).
"""

import logging
import struct

import numpy as np

from core.arch import emit_spec, parse_spec
from core.errors import FormatError
from core.network import Network, build_network

logger = logging.getLogger(__name__)

MAGIC = b'ANTKIT\0'
VERSION = 1
_U32 = struct.Struct('<I')
_F64 = np.dtype('<f8')


def _tensors(network: Network):
    arrays = [param.data for param in network.parameters()]
    arrays += [getattr(stats, attr) for _, stats, attr in network.named_buffers()]
    return arrays


def dumps(network: Network) -> bytes:
    spec = emit_spec(network.spec).encode('utf-8')
    arrays = _tensors(network)
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(spec)), spec, _U32.pack(len(arrays))]
    for array in arrays:
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(extent) for extent in array.shape)
        parts.append(np.ascontiguousarray(array, dtype=_F64).tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.blob):
            raise FormatError(f'checkpoint truncated while reading {what}', offset=self.offset)
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(_U32.size, what))[0]


def loads(blob: bytes) -> Network:
    reader = _Reader(blob)
    if reader.take(len(MAGIC), 'magic') != MAGIC:
        raise FormatError('not an antkit checkpoint (bad magic)', offset=0)
    version = reader.u32('version')
    if version != VERSION:
        raise FormatError(f'unsupported checkpoint version {version}', offset=len(MAGIC))
    length = reader.u32('spec length')
    spec_offset = reader.offset
    try:
        spec = parse_spec(reader.take(length, 'spec').decode('utf-8'))
    except UnicodeDecodeError as exc:
        raise FormatError(f'spec is not UTF-8: {exc.reason}', offset=spec_offset) from exc
    network = build_network(spec)
    params = network.parameters()
    buffers = network.named_buffers()
    count_offset = reader.offset
    count = reader.u32('tensor count')
    if count != len(params) + len(buffers):
        raise FormatError(f'{count} tensors stored, {spec.name} has {len(params)} parameters and '
                          f'{len(buffers)} buffers', offset=count_offset)
    arrays = []
    for k in range(count):
        start = reader.offset
        ndim = reader.u32(f'tensor {k} rank')
        shape = tuple(reader.u32(f'tensor {k} shape') for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(size * _F64.itemsize, f'tensor {k} data'), dtype=_F64)
        arrays.append((start, data.reshape(shape).astype(np.float64)))
    if reader.offset != len(blob):
        raise FormatError(f'{len(blob) - reader.offset} trailing bytes after the last tensor', offset=reader.offset)

    for param, (start, array) in zip(params, arrays[:len(params)]):
        if array.shape != param.shape:
            raise FormatError(f'{param.name}: stored shape {array.shape} != {param.shape}', offset=start)
        param.assign(array)
    for (name, stats, attr), (start, array) in zip(buffers, arrays[len(params):]):
        if array.shape != getattr(stats, attr).shape:
            raise FormatError(f'{name}: stored shape {array.shape} != {getattr(stats, attr).shape}', offset=start)
        setattr(stats, attr, array)
    return network


def save_checkpoint(network: Network, path: str) -> str:
    with open(path, 'wb') as f:
        f.write(dumps(network))
    logger.info('saved checkpoint of %s to %s', network.spec.name, path)
    return path


def load_checkpoint(path: str) -> Network:
    with open(path, 'rb') as f:
        return loads(f.read())
