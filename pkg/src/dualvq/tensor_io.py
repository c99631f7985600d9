"""Binary dump format for dense float64 arrays.

Layout: magic ``DVQT``, version u32, ndim u32, extents u64[ndim], then the
values as little-endian float64 in row-major order. Writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"DVQT"
VERSION = 1


def array_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + arr.astype("<f8").tobytes()


def bytes_to_array(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one dump starting at ``offset``; returns (array, next offset)."""
    if blob[offset : offset + 4] != MAGIC:
        raise ValueError(f"bad tensor dump magic {blob[offset:offset + 4]!r}")
    version, ndim = struct.unpack_from("<II", blob, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor dump version {version}")
    pos = offset + 12
    shape = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = pos + 8 * count
    arr = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, end


def atomic_write_bytes(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_array(path: str, arr: np.ndarray):
    atomic_write_bytes(path, array_to_bytes(arr))


def load_array(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    arr, end = bytes_to_array(blob)
    if end != len(blob):
        raise ValueError(f"trailing bytes in tensor dump {path}")
    return arr
