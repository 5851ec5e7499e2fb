"""ETNS binary tensor format.

Layout: b'ETNS', u8 version (1), u8 rank, rank x u32 little-endian dims,
then the float64 little-endian row-major payload.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from etcseg.errors import FormatError

MAGIC = b'ETNS'
VERSION = 1
_LE_F64 = np.dtype('<f8')

PathLike = Union[str, Path]


def encode_tensor(array) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} exceeds the ETNS limit of 255")
    if any(dim <= 0 for dim in array.shape):
        raise FormatError(f"ETNS dims must be positive, got {array.shape}")
    header = MAGIC + struct.pack('<BB', VERSION, array.ndim)
    header += struct.pack(f'<{array.ndim}I', *array.shape)
    return header + np.ascontiguousarray(array, dtype=_LE_F64).tobytes()


def write_tensor(stream: BinaryIO, array):
    stream.write(encode_tensor(array))


def _read_exact(stream: BinaryIO, count: int, what: str) -> bytes:
    chunk = stream.read(count)
    if len(chunk) != count:
        raise FormatError(f"truncated ETNS stream while reading {what}")
    return chunk


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 4, 'magic')
    if magic != MAGIC:
        raise FormatError(f"bad ETNS magic {magic!r}")
    version, rank = struct.unpack('<BB', _read_exact(stream, 2, 'header'))
    if version != VERSION:
        raise FormatError(f"unsupported ETNS version {version}")
    shape = struct.unpack(f'<{rank}I', _read_exact(stream, 4 * rank, 'dims')) if rank else ()
    if any(dim == 0 for dim in shape):
        raise FormatError(f"ETNS dims must be positive, got {shape}")
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(stream, 8 * count, 'payload')
    return np.frombuffer(payload, dtype=_LE_F64).astype(np.float64).reshape(shape)


def atomic_write_bytes(path: PathLike, payload: bytes):
    """Write to a temp file in the same directory, then rename over ``path``"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def save_tensor(path: PathLike, array):
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, 'rb') as handle:
        array = read_tensor(handle)
        if handle.read(1):
            raise FormatError(f"trailing bytes after ETNS tensor in {path}")
    return array
