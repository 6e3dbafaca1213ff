"""
Binary grid blocks.

Layout: 16-byte little-endian header (4-byte magic, u32 D, u32 n_rows,
u32 n_cols) followed by D*n_rows*n_cols values, row-major, day-major.
``QGRD`` blocks carry IEEE-754 float32 values; ``QG64`` blocks carry float64
and are used where bit-exact reloads matter (checkpoints).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from src.exceptions import GridFormatError, ShapeMismatchError

MAGIC_F32 = b"QGRD"
MAGIC_F64 = b"QG64"
HEADER = struct.Struct("<4sIII")

_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}


def write_grid(stream: BinaryIO, array: np.ndarray, magic: bytes = MAGIC_F32) -> int:
    """
    Write one 3-D block.

    Args:
        stream: Binary sink
        array: D x n_rows x n_cols values
        magic: MAGIC_F32 or MAGIC_F64

    Returns:
        Number of bytes written
    """
    if magic not in _DTYPES:
        raise GridFormatError(f"unknown magic {magic!r}")
    array = np.asarray(array)
    if array.ndim != 3:
        raise ShapeMismatchError(f"grid blocks are 3-D, got shape {array.shape}")
    days, rows, cols = array.shape
    payload = np.ascontiguousarray(array, dtype=_DTYPES[magic]).tobytes(order="C")
    stream.write(HEADER.pack(magic, days, rows, cols))
    stream.write(payload)
    return HEADER.size + len(payload)


def read_grid(stream: BinaryIO) -> np.ndarray:
    """Read one block written by ``write_grid``; values come back as float64."""
    header = stream.read(HEADER.size)
    if len(header) != HEADER.size:
        raise GridFormatError("truncated grid header")
    magic, days, rows, cols = HEADER.unpack(header)
    dtype = _DTYPES.get(magic)
    if dtype is None:
        raise GridFormatError(f"bad magic {magic!r}")
    count = days * rows * cols
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise GridFormatError(f"truncated grid payload: expected {count} values")
    values = np.frombuffer(payload, dtype=dtype).reshape(days, rows, cols)
    return values.astype(np.float64)
