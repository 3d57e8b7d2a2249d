"""Shared on-disk tensor format.

Layout (all little-endian)::

    b"FDWM"  magic
    u16      format version
    u8       rank
    u32*rank dims
    f32*     payload, row-major

Complex arrays are stored with a trailing dimension of 2 (interleaved re, im).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"FDWM"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array)
    if np.iscomplexobj(arr):
        arr = np.stack([arr.real, arr.imag], axis=-1)
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    fh.write(MAGIC)
    fh.write(struct.pack("<HB", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(7)
    if len(head) < 7 or head[:4] != MAGIC:
        raise TensorFormatError("bad magic; not an FDWM tensor")
    version, rank = struct.unpack("<HB", head[4:])
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise TensorFormatError("truncated tensor header")
    dims = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"truncated payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)


def as_complex(array: np.ndarray) -> np.ndarray:
    """Inverse of the interleaved complex layout."""
    if array.shape[-1] != 2:
        raise TensorFormatError("complex tensors need a trailing dim of 2")
    return array[..., 0].astype(np.float64) + 1j * array[..., 1].astype(np.float64)
