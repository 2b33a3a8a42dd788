"""Reader and writer for the IDX binary format used by MNIST-style datasets.

Layout: a big-endian 32-bit magic number whose low byte is the number of
dimensions (``0x00000803`` for ``N x rows x cols`` unsigned-byte images,
``0x00000801`` for ``N`` unsigned-byte labels), one big-endian 32-bit size
per dimension, then the raw bytes in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..models import pixels_to_unit

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MAX_ELEMENTS = 1 << 31


class IdxFormatError(ValueError):
    """Bad magic number, truncated payload or implausible dimension sizes."""


def _read(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise IdxFormatError(f"{path}: dimensions {dims} overflow the element limit")
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: payload has {len(raw) - header} bytes, expected {count}")
    if len(raw) - header > count:
        raise IdxFormatError(f"{path}: {len(raw) - header - count} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_bytes(path) -> np.ndarray:
    """Raw ``(N, rows, cols)`` uint8 images."""
    return _read(path, IMAGES_MAGIC).copy()


def load_idx_images(path) -> np.ndarray:
    """Images as ``(N, rows, cols)`` float grids in ``[-1, 1]`` (value ``2 v / 255 - 1``)."""
    return pixels_to_unit(_read(path, IMAGES_MAGIC))


def load_idx_labels(path) -> np.ndarray:
    return _read(path, LABELS_MAGIC).copy()


def _write(path, magic: int, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if array.size and (array.min() < 0 or array.max() > 255 or np.any(array != np.round(array))):
            raise ValueError("IDX payload must be integers in 0..255")
        array = array.astype(np.uint8)
    if array.ndim != magic & 0xFF:
        raise ValueError(f"expected a {magic & 0xFF}-D array, got {array.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def write_idx_images(path, images) -> None:
    """Write ``(N, rows, cols)`` unsigned-byte images."""
    _write(path, IMAGES_MAGIC, images)


def write_idx_labels(path, labels) -> None:
    _write(path, LABELS_MAGIC, labels)


def unit_to_pixels(grid) -> np.ndarray:
    """Inverse of the ``[-1, 1]`` preprocessing, exact on grid values."""
    return np.rint((np.asarray(grid, dtype=np.float64) + 1.0) * 127.5).astype(np.uint8)
