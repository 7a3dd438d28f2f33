"""NPFT v1 tensor files and shared array validation.

Every tensor that leaves or enters the engine goes through this format:
little-endian, magic ``NPFT``, version byte, dtype byte (1 = float32),
two reserved zero bytes, a u32 rank, one u64 extent per axis, then the
row-major float32 payload. No compression, no padding.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NPFT"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sBBHI")  # magic, version, dtype, reserved, ndim


class NpftError(ValueError):
    """Malformed NPFT file; the message names the offending field."""


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise ValueError if ``arr`` contains NaN or Inf."""
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_f32(arr, name: str = "tensor") -> np.ndarray:
    """Validate and return ``arr`` as a contiguous float32 array."""
    # rank check must precede ascontiguousarray, which promotes 0-d to 1-d
    if np.asarray(arr).ndim == 0:
        raise ValueError(f"{name} must have at least one axis")
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if any(e < 1 for e in out.shape):
        raise ValueError(f"{name} has an empty axis: shape {out.shape}")
    require_finite(name, out)
    return out


def write_tensor(path, t) -> None:
    """Serialize ``t`` (any array-like) to ``path`` as NPFT v1."""
    data = as_f32(t)
    path = Path(path)
    payload = data.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    """Read an NPFT v1 file back into a float32 array."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise NpftError(f"header: file is {len(raw)} bytes, need {_HEADER.size}")
    magic, version, dtype, reserved, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise NpftError(f"magic: expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise NpftError(f"version: unsupported value {version}")
    if dtype != DTYPE_F32:
        raise NpftError(f"dtype: unsupported value {dtype}")
    if reserved != 0:
        raise NpftError(f"reserved: expected 0, found {reserved}")
    if ndim < 1:
        raise NpftError(f"ndim: expected >= 1, found {ndim}")
    offset = _HEADER.size
    extents_size = 8 * ndim
    if len(raw) < offset + extents_size:
        raise NpftError(f"extents: need {extents_size} bytes, found {len(raw) - offset}")
    extents = struct.unpack_from(f"<{ndim}Q", raw, offset)
    if any(e < 1 for e in extents):
        raise NpftError(f"extents: empty axis in {extents}")
    offset += extents_size
    count = 1
    for e in extents:
        count *= e
    expected = count * 4
    actual = len(raw) - offset
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise NpftError(f"payload: {kind}, expected {expected} bytes, found {actual}")
    data = np.frombuffer(raw, dtype="<f4", offset=offset, count=count)
    return data.reshape(extents).copy()


def write_tensor_atomic(path, t) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    write_tensor(tmp, t)
    os.replace(tmp, path)
