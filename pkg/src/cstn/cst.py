"""The ``.cst`` binary tensor container.

Layout (little endian)::

    b"CST1" | u8 dtype code (0 = float32) | u8 ndim | ndim x u32 extents | payload

The payload is the row-major float32 data.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CST1"
DTYPE_CODES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")  # ascontiguousarray would turn 0-d into 1-d
    if arr.ndim > 255:
        raise FormatError(f"too many dimensions: {arr.ndim}")
    head = MAGIC + struct.pack("<BB", 0, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns (array, end offset)."""
    if len(blob) - offset < 6:
        raise FormatError("truncated header")
    if blob[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {blob[offset:offset + 4]!r}, expected {MAGIC!r}")
    code, ndim = struct.unpack_from("<BB", blob, offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype code {code}")
    pos = offset + 6
    if len(blob) - pos < 4 * ndim:
        raise FormatError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", blob, pos)
    pos += 4 * ndim
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(blob) - pos}")
    arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(shape).astype(np.float32), pos + nbytes


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    arr, end = decode(blob)
    if end != len(blob):
        raise FormatError(f"{os.fspath(path)}: {len(blob) - end} trailing bytes")
    return arr
