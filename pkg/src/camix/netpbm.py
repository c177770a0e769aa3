"""Binary netpbm IO: P6 (PPM) for images, P5 (PGM) for label/mask grids.

8-bit only. Readers are strict and report the byte offset of the first
problem; writers emit the canonical single-space header with maxval 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .camx import FormatError


def _parse_header(data: bytes, magic: bytes):
    """Return (width, height, payload_offset); raises FormatError."""
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"expected integer header field, got {token!r}", start)
        fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}", 2)
    return width, height, pos


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write (H, W, 3) uint8 pixels as binary P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _parse_header(data, b"P6")
    expected = w * h * 3
    if len(data) - pos < expected:
        raise FormatError(f"payload truncated: need {expected} bytes, have {len(data) - pos}", len(data))
    return np.frombuffer(data[pos : pos + expected], dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm(path, grid: np.ndarray) -> None:
    """Write (H, W) uint8 values as binary P5."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.dtype != np.uint8:
        raise ValueError(f"expected (H, W) uint8, got {grid.shape} {grid.dtype}")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(grid.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _parse_header(data, b"P5")
    expected = w * h
    if len(data) - pos < expected:
        raise FormatError(f"payload truncated: need {expected} bytes, have {len(data) - pos}", len(data))
    return np.frombuffer(data[pos : pos + expected], dtype=np.uint8).reshape(h, w).copy()
