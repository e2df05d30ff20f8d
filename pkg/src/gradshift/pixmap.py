"""Binary Netpbm I/O: 8-bit PGM (P5) and PPM (P6), maxval 255.

Floats in [0, 1] map to bytes via round(255 * v) with halves away from zero;
reading divides by 255. Headers follow the Netpbm convention (whitespace
separated tokens, '#' comments allowed).
"""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError


def quantize(values: np.ndarray) -> np.ndarray:
    """round(255 * v) as uint8; v is expected to lie in [0, 1]."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a 2-D float array in [0, 1] as binary PGM."""
    if gray.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize(gray).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an HxWx3 float array in [0, 1] as binary PPM."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM wants an HxWx3 array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize(rgb).tobytes())


def _read_header(data: bytes, path) -> tuple[bytes, int, int, int]:
    """Parse magic + width/height/maxval, returning (magic, w, h, data offset)."""
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in b"56":
        raise DataFormatError(f"{path}: not a binary PGM/PPM (offset 0)")
    magic = data[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise DataFormatError(f"{path}: bad header token {token!r} at offset {start}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    return magic, w, h, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a 2-D float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, pos = _read_header(data, path)
    if magic != b"P5":
        raise DataFormatError(f"{path}: expected PGM (P5), found {magic.decode()}")
    if len(data) - pos != w * h:
        raise DataFormatError(f"{path}: pixel payload is {len(data) - pos} bytes, "
                              f"expected {w * h} (offset {pos})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an HxWx3 float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, pos = _read_header(data, path)
    if magic != b"P6":
        raise DataFormatError(f"{path}: expected PPM (P6), found {magic.decode()}")
    if len(data) - pos != 3 * w * h:
        raise DataFormatError(f"{path}: pixel payload is {len(data) - pos} bytes, "
                              f"expected {3 * w * h} (offset {pos})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
