"""Binary parameter container.

Layout (all integers little-endian)::

    b"TSV1"  u32 version  32-byte sha256 config digest  u32 record count
    per record: u16 name length, UTF-8 name, u8 ndim, u32 dims..., float64 LE data

Records are written in sorted name order so equal states give equal bytes.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSV1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(digest)
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(blob: bytes, expected_digest: bytes | None = None) -> tuple[dict[str, np.ndarray], bytes]:
    view = memoryview(blob)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(read(4)) != MAGIC:
        raise CheckpointError("not a TSV1 checkpoint")
    (version,) = struct.unpack("<I", read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(read(32))
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint was written for a different model configuration")
    (count,) = struct.unpack("<I", read(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2))
        name = bytes(read(n)).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last record")
    return state, digest


def save(path, state: dict[str, np.ndarray], digest: bytes) -> None:
    Path(path).write_bytes(encode(state, digest))


def load(path, expected_digest: bytes | None = None) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), expected_digest)[0]
