"""Binary embedding checkpoints and atomic file writes.

Layout (little-endian)::

    9 bytes   magic  b"GSASA-EM1"
    u32       format version
    u32 u32   m, d
    8 bytes   blake2b-64 digest of the payload
    m*d f32   row-major payload
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"GSASA-EM1"
VERSION = 1
_HEADER = struct.Struct("<III8s")


def payload_digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise CheckpointError(f"expected a 2-D matrix, got shape {matrix.shape}")
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    m, d = matrix.shape
    return MAGIC + _HEADER.pack(VERSION, m, d, payload_digest(payload)) + payload


def save_checkpoint(path, matrix: np.ndarray) -> None:
    atomic_write(path, encode_checkpoint(matrix))


def load_checkpoint(path) -> np.ndarray:
    """Return the stored float32 matrix; any header or size problem raises."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    head = len(MAGIC) + _HEADER.size
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an embedding checkpoint")
    if len(raw) < head:
        raise CheckpointError(f"{path}: truncated header")
    version, m, d, digest = _HEADER.unpack(raw[len(MAGIC):head])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version (expected {VERSION}, found {version})")
    expected = head + 4 * m * d
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes for a {m}x{d} matrix, found {len(raw)}")
    payload = raw[head:]
    if payload_digest(payload) != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(m, d).astype(np.float32)
