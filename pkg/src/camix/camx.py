"""CAMX tensor container: magic `CAMX`, u32 version, u8 dtype, dims, raw data.

Layout (all integers little-endian):
    4 bytes  magic b"CAMX"
    u32      version (currently 1)
    u8       dtype code: 0 = float32, 1 = float64
    u32      ndim
    ndim*u64 dims
    raw array data, little-endian, C order

Used for checkpoints, the spatial prior, and NaN postmortem dumps.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CAMX"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed container; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<B", code))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()

    def take(n: int, offset: int) -> bytes:
        if offset + n > len(data):
            raise FormatError("truncated file", len(data))
        return data[offset : offset + n]

    if take(4, 0) != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack("<I", take(4, 4))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (code,) = struct.unpack("<B", take(1, 8))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", 8)
    (ndim,) = struct.unpack("<I", take(4, 9))
    dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, 13))
    payload_at = 13 + 8 * ndim
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = count * dtype.itemsize
    payload = take(expected, payload_at)
    if len(data) != payload_at + expected:
        raise FormatError("trailing bytes after payload", payload_at + expected)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))
