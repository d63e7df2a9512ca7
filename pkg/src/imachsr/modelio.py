"""IMHM model files: named float64 tensors, little-endian.

Layout::

    magic "IMHM" | version u16 | n_tensors u32
    n_tensors x ( name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | data f64[prod(dims)] )
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"IMHM"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ModelFormatError("truncated model file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ModelFormatError(f"unsupported IMHM version {version}")
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise ModelFormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return state


def save(state: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
