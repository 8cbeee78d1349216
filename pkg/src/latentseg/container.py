"""The ``.lcr`` compressed-image container and the end-to-end file pipeline.

Byte layout (little-endian, IEEE-754 float32)::

    offset  size  field
    0       4     magic b"LCR1"
    4       1     version (1)
    5       4     orig_height
    9       4     orig_width
    13      1     latent_channels
    14      1     d (digest units)
    15      1     n (bit length)
    16      4     delta (min)
    20      4     Delta (max)
    24      4     symbol_count
    28      var   Huffman dictionary (u16 size, then u8 value / u8 length pairs)
    ...     4     payload bit count
    ...     var   payload, ceil(bits / 8) bytes, MSB-first

The spatial downsample factor is implied by ``d``: ``4 * 2**d``.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import huffman
from .codec import CodecPair, compress_forward, decompress_forward
from .errors import (
    BadMagicError,
    ContainerError,
    CorruptionError,
    IncompatibleError,
    InconsistentError,
    TruncatedError,
    VersionError,
)
from .huffman import BitPayload, HuffmanDict
from .imageio import from_tensor_data, read_ppm, to_tensor_data, write_pnm
from .quantizer import IntLatent, QuantParams, fit_params, float2int, int2float
from .tensor import Tensor, no_grad

MAGIC = b"LCR1"
VERSION = 1
_HEAD = struct.Struct("<4sBIIBBBffI")
_BITS = struct.Struct("<I")
FIXED_HEADER_BYTES = _HEAD.size + _BITS.size
STEM_STRIDE = 4
DIGEST_STRIDE = 2


def downsample_for(d: int) -> int:
    return STEM_STRIDE * DIGEST_STRIDE**d


@dataclass(frozen=True)
class CompressedBlob:
    orig_height: int
    orig_width: int
    latent_channels: int
    d: int
    n: int
    delta: float
    Delta: float
    symbol_count: int
    dictionary: HuffmanDict
    payload: BitPayload
    version: int = VERSION

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = downsample_for(self.d)
        return (self.latent_channels, self.orig_height // s, self.orig_width // s)

    @property
    def params(self) -> QuantParams:
        return QuantParams(self.delta, self.Delta, self.n)

    def validate(self) -> None:
        if self.version != VERSION:
            raise VersionError(f"unsupported container version {self.version}")
        if not 1 <= self.d <= 3 or not 2 <= self.n <= 8 or self.latent_channels < 1:
            raise InconsistentError(f"invalid header d={self.d} n={self.n} channels={self.latent_channels}")
        s = downsample_for(self.d)
        if self.orig_height < 1 or self.orig_width < 1 or self.orig_height % s or self.orig_width % s:
            raise InconsistentError(f"image {self.orig_height}x{self.orig_width} not divisible by {s}")
        if not (math.isfinite(self.delta) and math.isfinite(self.Delta)) or self.delta > self.Delta:
            raise InconsistentError(f"invalid quantisation range [{self.delta}, {self.Delta}]")
        expected = int(np.prod(self.latent_shape))
        if self.symbol_count != expected:
            raise InconsistentError(f"symbol_count {self.symbol_count} != {expected} for declared geometry")
        alphabet = self.dictionary.alphabet
        if alphabet and alphabet[-1] > (1 << self.n) - 1:
            raise InconsistentError(f"dictionary symbol {alphabet[-1]} exceeds {self.n}-bit range")
        if self.symbol_count and not alphabet:
            raise InconsistentError("empty dictionary for a non-empty latent")
        # min/max fitting always emits symbol 0 and, unless the range is a
        # single value, symbol 2**n - 1
        want = [0] if self.delta == self.Delta else [0, (1 << self.n) - 1]
        if alphabet and [alphabet[0], alphabet[-1]][: len(want)] != want:
            raise InconsistentError(f"dictionary range {alphabet[0]}..{alphabet[-1]} does not span the {self.n}-bit range")
        if self.delta == self.Delta and len(alphabet) > 1:
            raise InconsistentError("constant latent with more than one symbol")


def serialize(blob: CompressedBlob) -> bytes:
    blob.validate()
    head = _HEAD.pack(MAGIC, blob.version, blob.orig_height, blob.orig_width, blob.latent_channels,
                      blob.d, blob.n, blob.delta, blob.Delta, blob.symbol_count)
    return b"".join([head, blob.dictionary.to_bytes(), _BITS.pack(blob.payload.nbits), blob.payload.data])


def parse(buf: bytes) -> CompressedBlob:
    """Parse and validate a container; every failure is a :class:`ContainerError`."""
    if len(buf) < 4:
        raise TruncatedError(f"file of {len(buf)} bytes is shorter than the magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 5:
        raise TruncatedError("header truncated before version")
    if buf[4] != VERSION:
        raise VersionError(f"unsupported container version {buf[4]}")
    if len(buf) < _HEAD.size:
        raise TruncatedError(f"header truncated at {len(buf)} of {_HEAD.size} bytes")
    _, version, h, w, c, d, n, lo, hi, count = _HEAD.unpack_from(buf, 0)
    try:
        dictionary, pos = HuffmanDict.from_bytes(buf, _HEAD.size)
    except CorruptionError as exc:
        raise InconsistentError(f"invalid dictionary: {exc}") from None
    if pos + _BITS.size > len(buf):
        raise TruncatedError("payload bit count truncated")
    (nbits,) = _BITS.unpack_from(buf, pos)
    pos += _BITS.size
    need = (nbits + 7) // 8
    data = buf[pos:]
    if len(data) < need:
        raise TruncatedError(f"payload truncated: {len(data)} of {need} bytes")
    if len(data) > need:
        raise InconsistentError(f"{len(data) - need} trailing bytes after payload")
    blob = CompressedBlob(h, w, c, d, n, lo, hi, count, dictionary, BitPayload(nbits, bytes(data)), version)
    blob.validate()
    return blob


def header_size(blob: CompressedBlob) -> int:
    """Bytes other than the payload: fixed fields plus the dictionary."""
    return FIXED_HEADER_BYTES + len(blob.dictionary.to_bytes())


def compression_factor(height: int, width: int, file_size_bytes: int) -> float:
    """Raw 24-bit RGB size over the compressed size."""
    if file_size_bytes <= 0:
        raise ValueError("compressed size must be positive")
    return 3.0 * height * width / file_size_bytes


def encode_latent(latent: Tensor | np.ndarray, n: int, d: int, orig_hw: tuple[int, int]) -> CompressedBlob:
    """Quantise and entropy-code one (1, C, h, w) or (C, h, w) latent."""
    data = latent.data if isinstance(latent, Tensor) else np.asarray(latent, np.float32)
    data = data.reshape(data.shape[-3:])
    params = fit_params(data, n)
    q = float2int(data, params)
    dictionary = huffman.build_dict(q)
    payload = huffman.encode(q, dictionary)
    return CompressedBlob(orig_hw[0], orig_hw[1], data.shape[0], d, n, params.delta, params.Delta,
                          q.symbols.size, dictionary, payload)


def decode_symbols(blob: CompressedBlob) -> IntLatent:
    symbols = huffman.decode(blob.payload, blob.dictionary, blob.symbol_count)
    return IntLatent(blob.latent_shape, symbols, blob.params)


def latent_from_blob(blob: CompressedBlob) -> Tensor:
    """Dequantised latent (1, C, h, w); needs no network at all."""
    z = int2float(decode_symbols(blob))
    return Tensor(z.data[None])


def check_compatible(pair: CodecPair, blob: CompressedBlob) -> None:
    cfg = pair.config
    if cfg.d != blob.d or cfg.latent_channels != blob.latent_channels or cfg.downsample != downsample_for(blob.d):
        raise IncompatibleError(
            f"codec (d={cfg.d}, channels={cfg.latent_channels}, s={cfg.downsample}) cannot decode "
            f"container (d={blob.d}, channels={blob.latent_channels}, s={downsample_for(blob.d)})"
        )


def compress_image(pair: CodecPair, image: np.ndarray, n: int) -> CompressedBlob:
    """(H, W, 3) uint8 -> container."""
    h, w = image.shape[:2]
    if pair.config.downsample != downsample_for(pair.config.d):
        raise IncompatibleError("container format requires stem_stride=4 and digest_stride=2")
    with no_grad():
        latent = compress_forward(pair, Tensor(to_tensor_data(image)))
    return encode_latent(latent, n, pair.config.d, (h, w))


def decompress_blob(pair: CodecPair, blob: CompressedBlob) -> np.ndarray:
    """Container -> (H, W, 3) uint8."""
    check_compatible(pair, blob)
    latent = latent_from_blob(blob)
    with no_grad():
        out = decompress_forward(pair, latent)
    return from_tensor_data(out.data)


def write_blob(path: str | os.PathLike, blob: CompressedBlob) -> int:
    raw = serialize(blob)
    with open(path, "wb") as fh:
        fh.write(raw)
    return len(raw)


def read_blob(path: str | os.PathLike) -> CompressedBlob:
    with open(path, "rb") as fh:
        return parse(fh.read())


def compress_file(image_path: str | os.PathLike, pair: CodecPair, n: int, out_path: str | os.PathLike) -> Path:
    blob = compress_image(pair, read_ppm(image_path), n)
    write_blob(out_path, blob)
    return Path(out_path)


def decompress_file(blob_path: str | os.PathLike, pair: CodecPair, out_path: str | os.PathLike) -> Path:
    """Decode a container to a P6 image; nothing is written on failure."""
    image = decompress_blob(pair, read_blob(blob_path))
    write_pnm(out_path, image)
    return Path(out_path)


__all__ = [
    "CompressedBlob", "ContainerError", "FIXED_HEADER_BYTES", "compress_file", "compress_image",
    "compression_factor", "decode_symbols", "decompress_blob", "decompress_file", "encode_latent",
    "header_size", "latent_from_blob", "parse", "read_blob", "serialize", "write_blob",
]
