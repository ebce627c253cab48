"""Binary matrix and label file formats.

FMAT0001: 8-byte magic, u64 rows, u64 cols, rows*cols float32 row-major.
FLBL0001: 8-byte magic, u64 count, count uint32 class ids.
All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LengthMismatchError, MalformedHeaderError

FMAT_MAGIC = b"FMAT0001"
FLBL_MAGIC = b"FLBL0001"


def encode_fmat(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"FMAT payload must be 2-D, got {m.shape}")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return FMAT_MAGIC + struct.pack("<QQ", rows, cols) + payload


def decode_fmat(raw: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 24 or raw[:8] != FMAT_MAGIC:
        raise MalformedHeaderError(f"{source}: missing FMAT0001 header")
    rows, cols = struct.unpack("<QQ", raw[8:24])
    payload = raw[24:]
    expected = rows * cols * 4
    if len(payload) != expected:
        if len(payload) < expected:
            raise LengthMismatchError(
                f"{source}: payload has {len(payload)} bytes, header implies {expected}"
            )
        raise MalformedHeaderError(
            f"{source}: header {rows}x{cols} disagrees with payload of {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(rows, cols)


def write_fmat(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_fmat(matrix))


def read_fmat(path) -> np.ndarray:
    return decode_fmat(Path(path).read_bytes(), source=str(path))


def encode_flbl(labels) -> bytes:
    lab = np.asarray(labels)
    if lab.ndim != 1 or (lab.size and lab.min() < 0):
        raise ValueError("labels must be a 1-D array of non-negative ints")
    return FLBL_MAGIC + struct.pack("<Q", lab.size) + lab.astype("<u4").tobytes()


def decode_flbl(raw: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 16 or raw[:8] != FLBL_MAGIC:
        raise MalformedHeaderError(f"{source}: missing FLBL0001 header")
    (count,) = struct.unpack("<Q", raw[8:16])
    payload = raw[16:]
    if len(payload) != count * 4:
        raise LengthMismatchError(
            f"{source}: label payload has {len(payload)} bytes, header implies {count * 4}"
        )
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def write_flbl(path, labels) -> None:
    Path(path).write_bytes(encode_flbl(labels))


def read_flbl(path) -> np.ndarray:
    return decode_flbl(Path(path).read_bytes(), source=str(path))
