"""Binary PPM (P6) / PGM (P5) rasters with 8-bit samples."""
from __future__ import annotations

import os

import numpy as np

from .errors import ImageFormatError


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    toks: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(toks) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        toks.append(buf[start:pos])
    # exactly one whitespace byte separates header from raster
    return toks, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Return (H, W, 3) for P6 or (H, W) for P5, dtype uint8."""
    toks, pos = _tokens(buf, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad PNM header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported geometry {width}x{height} maxval {maxval}")
    chans = 3 if magic == b"P6" else 1
    need = width * height * chans
    raster = buf[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"raster truncated: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, np.uint8).reshape(height, width, chans)
    return arr[:, :, 0].copy() if chans == 1 else arr.copy()


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 raster, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write raster of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode_pnm(fh.read())
    if arr.ndim != 3:
        raise ImageFormatError(f"{path}: expected a P6 colour image")
    return arr


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode_pnm(fh.read())
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected a P5 grey image")
    return arr


def write_pnm(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(arr))


def to_tensor_data(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (1, 3, H, W) float32 in [0, 1]."""
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def from_tensor_data(x: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[0]
    return np.clip(np.rint(x.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
