"""Minimal portable raster container for pre-extracted patches.

Layout: 4-byte magic "PRAS", then width, height, channels as little-endian
uint32, then width*height*channels samples of 8-bit row-major pixel data
(row, column, channel). Values map linearly to [0, 1] floats on read.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import SchemaError
from .grid import Grid2D

RASTER_MAGIC = b"PRAS"
_HEADER = struct.Struct("<III")


def write_raster(path, image: Grid2D) -> None:
    """Quantize a [0, 1] float grid to 8 bits and write the container."""
    values = np.clip(image.values, 0.0, 1.0)
    samples = np.round(values * 255.0).astype(np.uint8)
    h, w, c = samples.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(_HEADER.pack(w, h, c))
        fh.write(samples.tobytes())


def read_raster(path) -> Grid2D:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RASTER_MAGIC:
            raise SchemaError(f"not a raster file (magic {magic!r})")
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise SchemaError("raster header truncated")
        w, h, c = _HEADER.unpack(header)
        payload = fh.read()
    expected = w * h * c
    if len(payload) != expected:
        raise SchemaError(f"raster payload has {len(payload)} bytes, expected {expected}")
    samples = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    return Grid2D(samples.astype(np.float64) / 255.0)
