"""PFMT binary tensor container.

Layout (all integers little-endian)::

    offset 0   magic   b"PFMT"
    offset 4   version 0x01
    offset 5   dtype   0x01 (float64, little-endian)
    offset 6   ndim    uint32
    offset 10  extents uint32 * ndim
    ...        payload float64 * prod(extents), row-major
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"PFMT"
VERSION = 1
DTYPE_F64 = 1
_HEADER = 4 + 1 + 1 + 4


def encode(array) -> bytes:
    # np.asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    header = MAGIC + bytes([VERSION, DTYPE_F64]) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"truncated magic: need 4 bytes, have {len(buf)}", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER:
        raise FormatError(f"truncated header: need {_HEADER} bytes, have {len(buf)}", len(buf))
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}", 4)
    if buf[5] != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {buf[5]}", 5)
    (ndim,) = struct.unpack_from("<I", buf, 6)
    dims_end = _HEADER + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"truncated extents: need {dims_end} bytes for {ndim} dims, have {len(buf)}", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, _HEADER)
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    actual = len(buf) - dims_end
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise FormatError(f"{kind} payload: expected {expected} bytes, found {actual}", dims_end + min(actual, expected))
    return np.frombuffer(buf, dtype="<f8", offset=dims_end).reshape(shape).astype(np.float64)


def write_tensor(path, tensor) -> None:
    data = encode(tensor)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_tensor(path) -> Tensor:
    return Tensor(read_array(path))
