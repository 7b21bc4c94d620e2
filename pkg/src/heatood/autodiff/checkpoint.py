"""Binary tensor checkpoints.

Layout (little-endian): ``HOODCKPT``, u16 version, u32 layer count, then per
layer a u16 name length, the UTF-8 name, u8 rank, rank x u32 dims and the raw
float32 values. A model kind is carried as a ``kind/`` prefix on layer names.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"HOODCKPT"
VERSION = 1


def save_checkpoint(path, layers: dict[str, np.ndarray], kind: str | None = None) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(layers))
    for name, arr in layers.items():
        full = f"{kind}/{name}" if kind else name
        raw = full.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, kind: str | None = None) -> dict[str, np.ndarray]:
    """Read layers back; with ``kind`` given, require and strip that prefix."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {buf[:8]!r})", 0)
    pos = 8
    version, count = _unpack("<HI", buf, pos, path)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 8)
    pos += 6
    layers: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = _unpack("<H", buf, pos, path)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = _unpack("<B", buf, pos, path)
        pos += 1
        dims = _unpack(f"<{rank}I", buf, pos, path)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: layer {name!r} truncated, need {nbytes} bytes", pos)
        layers[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if kind is not None:
        prefix = f"{kind}/"
        wrong = [n for n in layers if not n.startswith(prefix)]
        if wrong:
            raise FormatError(f"{path}: expected a {kind!r} checkpoint, found layer {wrong[0]!r}")
        layers = {n[len(prefix) :]: a for n, a in layers.items()}
    return layers


def _unpack(fmt: str, buf: bytes, pos: int, path) -> tuple:
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise FormatError(f"{path}: truncated header, need {size} bytes", pos)
    return struct.unpack_from(fmt, buf, pos)
