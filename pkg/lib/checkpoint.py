#!/usr/bin/env python3
"""
Binary checkpoint format

All integers little-endian:

    magic      4 bytes  b"TMLC"
    version    u32
    length     u64      total file size including the checksum
    config     u32 byte count + UTF-8 JSON (role, em_mode, model config)
    params     u32 count, then per parameter:
                 u16 name length + UTF-8 name, u8 dtype code, u8 ndim,
                 ndim x u32 extents, raw little-endian payload
    optimizer  u8 present flag; when 1: u64 step, then per parameter in table
               order the first and second moments (same dtype and shape)
    checksum   u64      BLAKE2b-64 of every preceding byte

Load checks run in order: magic, version, length (truncation), checksum, then
the records are parsed.
"""

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import (
    CheckpointChecksumError, CheckpointFormatError, CheckpointTruncatedError,
    CheckpointVersionError, ConfigMismatchError,
)
from .optim import OptimizerState
from .tensor import Tensor
from .ugdc import EMMode, Model, Role, UGDCConfig, parameter_names

MAGIC = b'TMLC'
VERSION = 1
HEADER = struct.Struct('<4sIQ')
CHECKSUM_SIZE = 8

DTYPE_CODES = {np.dtype('float32'): 0, np.dtype('float64'): 1}
CODE_DTYPES = {code: dtype.newbyteorder('<') for dtype, code in DTYPE_CODES.items()}


def checksum(payload: bytes) -> int:
    return struct.unpack('<Q', hashlib.blake2b(payload, digest_size=CHECKSUM_SIZE).digest())[0]


def _array_record(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array).astype(array.dtype.newbyteorder('<'), copy=False).tobytes()


def parameter_bytes(model: Model) -> bytes:
    """Names and payloads of every parameter, in table order"""
    parts = []
    for name, p in model.named_parameters():
        parts.append(name.encode('utf-8'))
        parts.append(_array_record(p.data))
    return b''.join(parts)


def encode(model: Model, optimizer: Optional[OptimizerState] = None) -> bytes:
    config = json.dumps({
        'role': model.role.value,
        'em_mode': model.em_mode.value if model.em_mode else None,
        'model': model.config.to_dict(),
    }, sort_keys=True).encode('utf-8')

    body = [struct.pack('<I', len(config)), config]
    params = model.named_parameters()
    body.append(struct.pack('<I', len(params)))
    for name, p in params:
        encoded = name.encode('utf-8')
        body.append(struct.pack('<H', len(encoded)))
        body.append(encoded)
        body.append(struct.pack('<BB', DTYPE_CODES[p.data.dtype], p.ndim))
        body.append(struct.pack(f'<{p.ndim}I', *p.shape))
        body.append(_array_record(p.data))

    if optimizer is None:
        body.append(struct.pack('<B', 0))
    else:
        body.append(struct.pack('<BQ', 1, optimizer.step))
        for name, p in params:
            for moments in (optimizer.first, optimizer.second):
                body.append(_array_record(moments.get(name, np.zeros_like(p.data)).astype(p.data.dtype)))

    payload = b''.join(body)
    total = HEADER.size + len(payload) + CHECKSUM_SIZE
    head = HEADER.pack(MAGIC, VERSION, total) + payload
    return head + struct.pack('<Q', checksum(head))


class _Reader:
    def __init__(self, raw: bytes, pos: int, end: int):
        self.raw = raw
        self.pos = pos
        self.end = end

    def take(self, size: int) -> bytes:
        if self.pos + size > self.end:
            raise CheckpointFormatError("Record runs past the end of the checkpoint payload")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size))

    def array(self, dtype: np.dtype, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype)
        return data.astype(dtype.newbyteorder('='), copy=True).reshape(shape)


def _parameter(array: np.ndarray, name: str) -> Tensor:
    t = Tensor(array, requires_grad=True, name=name)
    # keep the stored element type even when the active default differs
    t.data = array
    return t


def decode(raw: bytes, source: str = '<bytes>') -> Tuple[Model, Optional[OptimizerState]]:
    if raw[:4] != MAGIC:
        if len(raw) < 4 and MAGIC.startswith(raw):
            raise CheckpointTruncatedError(f"Checkpoint shorter than its header: {source}")
        raise CheckpointFormatError(f"Not a checkpoint (bad magic): {source}")
    if len(raw) < HEADER.size + CHECKSUM_SIZE:
        raise CheckpointTruncatedError(f"Checkpoint shorter than its header: {source}")
    _, version, total = HEADER.unpack_from(raw)
    if version != VERSION:
        raise CheckpointVersionError(f"Unsupported checkpoint version {version} (expected {VERSION}): {source}")
    if len(raw) < total:
        raise CheckpointTruncatedError(f"Checkpoint truncated: {len(raw)} of {total} bytes: {source}")
    if len(raw) > total:
        raise CheckpointFormatError(f"Trailing bytes after checkpoint: {len(raw)} > {total}: {source}")

    stored = struct.unpack_from('<Q', raw, total - CHECKSUM_SIZE)[0]
    if checksum(raw[:total - CHECKSUM_SIZE]) != stored:
        raise CheckpointChecksumError(f"Checkpoint checksum mismatch: {source}")

    reader = _Reader(raw, HEADER.size, total - CHECKSUM_SIZE)
    (config_len,) = reader.unpack('<I')
    try:
        meta = json.loads(reader.take(config_len).decode('utf-8'))
        config = UGDCConfig.from_dict(meta['model'])
        role = Role(meta['role'])
        em_mode = EMMode(meta['em_mode']) if meta.get('em_mode') else None
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"Malformed checkpoint config block: {e}: {source}")

    parameters = OrderedDict()
    (count,) = reader.unpack('<I')
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        code, ndim = reader.unpack('<BB')
        if code not in CODE_DTYPES:
            raise CheckpointFormatError(f"Unknown dtype code {code} for '{name}': {source}")
        shape = reader.unpack(f'<{ndim}I')
        parameters[name] = _parameter(reader.array(CODE_DTYPES[code], shape), name)
    if list(parameters) != parameter_names(config):
        raise CheckpointFormatError(f"Parameter table does not match the stored model config: {source}")

    (present,) = reader.unpack('<B')
    optimizer = None
    if present:
        (step,) = reader.unpack('<Q')
        optimizer = OptimizerState(step=step)
        for name, p in parameters.items():
            dtype = p.data.dtype.newbyteorder('<')
            optimizer.first[name] = reader.array(dtype, p.shape)
            optimizer.second[name] = reader.array(dtype, p.shape)
    if reader.pos != reader.end:
        raise CheckpointFormatError(f"Unparsed bytes before checksum: {source}")

    return Model(role, config, parameters, em_mode=em_mode), optimizer


def save_checkpoint(path, model: Model, optimizer: Optional[OptimizerState] = None, logger=None):
    """Writes atomically: a temporary file in the target directory is renamed into place"""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    raw = encode(model, optimizer)
    temp_path = path.with_name(path.name + '.tmp')
    temp_path.write_bytes(raw)
    os.replace(temp_path, path)
    if logger:
        logger.info(f"CHECKPOINT_SAVED: {path} | role={model.role.value} | {len(raw)} bytes")


def load_checkpoint(path, expected_config: Optional[UGDCConfig] = None, role: Optional[Role] = None,
                    logger=None) -> Tuple[Model, Optional[OptimizerState]]:
    """
    Reads a checkpoint, optionally re-labelling it as another role

    When expected_config is given the stored architecture must match it exactly,
    otherwise ConfigMismatchError is raised.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointFormatError(f"Checkpoint not found: {path}")
    model, optimizer = decode(raw, source=str(path))
    if expected_config is not None and model.config.to_dict() != expected_config.to_dict():
        raise ConfigMismatchError(
            f"Checkpoint {path} was written for a different model config "
            f"(stored gdc_stages={list(model.config.gdc_stages)}, depth={model.config.depth})"
        )
    if role is not None:
        role = Role(role)
        if role == Role.EM and model.em_mode is None:
            model.em_mode = EMMode.RESIDUAL
        elif role != Role.EM:
            model.em_mode = None
        model.role = role
    if logger:
        logger.info(f"CHECKPOINT_LOADED: {path} | role={model.role.value}")
    return model, optimizer
