"""Weight checkpoint files.

Layout (all little-endian)::

    b"LCW1"
    repeated until EOF:
        u16 name length, utf-8 name
        u8 ndim, ndim x u32 dims
        prod(dims) x f32 values
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import BadMagicError, CorruptionError, TruncatedError

MAGIC = b"LCW1"


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a weight checkpoint (magic {buf[:4]!r})")
    pos = 4
    state: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"checkpoint entry name at byte {pos - nlen} is not utf-8") from None
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        state[name] = values.reshape(shape)
    return state


def save(path: str | os.PathLike, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
