"""F32G grid file format.

16-byte header: magic ``F32G``, u32 little-endian width, u32 height,
u32 channel count; then channels x height x width float32 little-endian,
row-major. Spacing and frame metadata live in the JSON case manifest,
not in the binary.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"F32G"
_HEADER = struct.Struct("<4sIII")

__all__ = ["read_f32g", "write_f32g", "MAGIC"]


def write_f32g(path, channels: np.ndarray) -> None:
    """Write a ``(C, H, W)`` (or ``(H, W)`` single-channel) array as F32G."""
    arr = np.asarray(channels)
    if arr.ndim == 2:
        arr = arr[None, ...]
    if arr.ndim != 3:
        raise DataError(f"F32G payload must be (C, H, W), got shape {arr.shape}")
    c, h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, w, h, c))
        fh.write(payload.tobytes())


def read_f32g(path) -> np.ndarray:
    """Read an F32G file into a ``(C, H, W)`` float32 array."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such grid file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated F32G header")
    magic, w, h, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise DataError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(c, h, w).copy()
