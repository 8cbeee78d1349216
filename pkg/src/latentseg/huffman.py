"""Canonical Huffman coding of integer symbol streams.

Dictionary wire format (little-endian)::

    u16 alphabet size
    per symbol, ascending value: u8 value, u8 code length

Payload bits are packed MSB-first; the final byte is zero-padded.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CorruptionError, LatentSegError, TruncatedError, ValidationError

MAX_CODE_LENGTH = 32


@dataclass(frozen=True)
class HuffmanDict:
    lengths: tuple[tuple[int, int], ...]  # (symbol, length), ascending symbol

    @classmethod
    def from_lengths(cls, lengths: dict[int, int]) -> "HuffmanDict":
        return cls(tuple(sorted((int(s), int(l)) for s, l in lengths.items())))

    @property
    def alphabet(self) -> list[int]:
        return [s for s, _ in self.lengths]

    def length_of(self) -> dict[int, int]:
        return dict(self.lengths)

    def codes(self) -> dict[int, tuple[int, int]]:
        """symbol -> (code value, code length) under canonical assignment."""
        order = sorted(self.lengths, key=lambda sl: (sl[1], sl[0]))
        out: dict[int, tuple[int, int]] = {}
        code = 0
        prev = order[0][1] if order else 0
        for sym, length in order:
            code <<= length - prev
            out[sym] = (code, length)
            code += 1
            prev = length
        return out

    def kraft_sum(self) -> Fraction:
        return sum((Fraction(1, 2**l) for _, l in self.lengths), Fraction(0))

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<H", len(self.lengths))]
        parts += [struct.pack("<BB", s, l) for s, l in self.lengths]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["HuffmanDict", int]:
        """Parse a dictionary at ``offset``; returns it and the end offset."""
        if offset + 2 > len(buf):
            raise TruncatedError(f"dictionary header truncated at byte {offset}")
        (size,) = struct.unpack_from("<H", buf, offset)
        end = offset + 2 + 2 * size
        if end > len(buf):
            raise TruncatedError(f"dictionary of {size} entries truncated at byte {len(buf)}")
        pairs = [struct.unpack_from("<BB", buf, offset + 2 + 2 * i) for i in range(size)]
        d = cls(tuple(pairs))
        d.validate()
        return d, end

    def validate(self) -> None:
        syms = self.alphabet
        if any(b <= a for a, b in zip(syms, syms[1:])):
            raise CorruptionError("dictionary symbols not strictly ascending")
        if any(not 1 <= l <= MAX_CODE_LENGTH for _, l in self.lengths):
            raise CorruptionError("dictionary code length outside [1, 32]")
        if len(self.lengths) == 1:
            if self.lengths[0][1] != 1:
                raise CorruptionError("single-symbol dictionary must use a 1-bit code")
        elif len(self.lengths) > 1 and self.kraft_sum() != 1:
            raise CorruptionError(f"dictionary violates Kraft equality (sum={self.kraft_sum()})")


@dataclass(frozen=True)
class BitPayload:
    nbits: int
    data: bytes

    def __post_init__(self):
        if not (self.nbits <= 8 * len(self.data) < self.nbits + 8):
            raise CorruptionError(f"{len(self.data)} payload bytes cannot hold exactly {self.nbits} bits")


def _symbols_array(symbols) -> np.ndarray:
    arr = getattr(symbols, "symbols", symbols)
    return np.asarray(arr, dtype=np.int64).reshape(-1)


def huffman_lengths(freqs: dict[int, int]) -> dict[int, int]:
    """Code length per symbol; ties merge the (frequency, smallest symbol) pair first."""
    if not freqs:
        raise ValidationError("cannot build a code for an empty stream")
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    heap = [(f, s, (s,)) for s, f in sorted(freqs.items())]
    heapq.heapify(heap)
    depth = {s: 0 for s in freqs}
    while len(heap) > 1:
        fa, ka, ma = heapq.heappop(heap)
        fb, kb, mb = heapq.heappop(heap)
        for s in ma + mb:
            depth[s] += 1
        heapq.heappush(heap, (fa + fb, min(ka, kb), ma + mb))
    if max(depth.values()) > MAX_CODE_LENGTH:
        raise LatentSegError(f"code length {max(depth.values())} exceeds {MAX_CODE_LENGTH}")
    return depth


def build_dict(symbols) -> HuffmanDict:
    arr = _symbols_array(symbols)
    if arr.size == 0:
        raise ValidationError("cannot build a dictionary for an empty stream")
    values, counts = np.unique(arr, return_counts=True)
    return HuffmanDict.from_lengths(huffman_lengths(dict(zip(values.tolist(), counts.tolist()))))


def encode(symbols, d: HuffmanDict) -> BitPayload:
    arr = _symbols_array(symbols)
    if arr.size == 0:
        return BitPayload(0, b"")
    codes = d.codes()
    top = max(max(codes), int(arr.max()), 0) + 1
    code_tab = np.zeros(top, np.int64)
    len_tab = np.zeros(top, np.int64)
    for s, (c, l) in codes.items():
        code_tab[s], len_tab[s] = c, l
    if arr.min() < 0 or np.any(len_tab[arr] == 0):
        bad = int(np.argmax((arr < 0) | (len_tab[np.clip(arr, 0, top - 1)] == 0)))
        raise CorruptionError(f"symbol {int(arr[bad])} at index {bad} is not in the dictionary")
    lens = len_tab[arr]
    width = int(lens.max())
    shifts = lens[:, None] - 1 - np.arange(width)[None, :]
    bits = (code_tab[arr][:, None] >> np.maximum(shifts, 0)) & 1
    bits = bits[shifts >= 0].astype(np.uint8)
    return BitPayload(int(bits.size), np.packbits(bits).tobytes())


def decode(payload: BitPayload, d: HuffmanDict, count: int) -> np.ndarray:
    """Decode exactly ``count`` symbols; every payload bit must be consumed."""
    if count == 0:
        if payload.nbits:
            raise CorruptionError(f"{payload.nbits} payload bits but zero symbols declared")
        return np.zeros(0, np.int64)
    if not d.lengths:
        raise CorruptionError("empty dictionary for a non-empty stream")
    # canonical tables: per length, first code value and offset into sorted symbols
    order = sorted(d.lengths, key=lambda sl: (sl[1], sl[0]))
    sorted_syms = [s for s, _ in order]
    max_len = order[-1][1]
    n_of_len = [0] * (max_len + 1)
    for _, l in order:
        n_of_len[l] += 1
    first = [0] * (max_len + 2)
    offset = [0] * (max_len + 2)
    code = 0
    idx = 0
    for l in range(1, max_len + 1):
        first[l] = code
        offset[l] = idx
        code = (code + n_of_len[l]) << 1
        idx += n_of_len[l]

    bits = np.unpackbits(np.frombuffer(payload.data, np.uint8)).tolist()
    nbits = payload.nbits
    out = [0] * count
    pos = 0
    for i in range(count):
        code = 0
        length = 0
        while True:
            if pos >= nbits:
                raise TruncatedError(f"payload exhausted at bit {pos} while decoding symbol {i}")
            code = (code << 1) | bits[pos]
            pos += 1
            length += 1
            k = code - first[length]
            if 0 <= k < n_of_len[length]:
                out[i] = sorted_syms[offset[length] + k]
                break
            if length >= max_len:
                raise CorruptionError(f"invalid code prefix at bit {pos - length} (symbol {i})")
    if pos != nbits:
        raise CorruptionError(f"{nbits - pos} trailing bits after symbol {count - 1} (bit offset {pos})")
    if any(bits[nbits:]):
        raise CorruptionError(f"non-zero padding after bit {nbits}")
    return np.asarray(out, dtype=np.int64)


def expected_length(d: HuffmanDict, freqs: dict[int, int]) -> float:
    total = sum(freqs.values())
    lens = d.length_of()
    return sum(f * lens[s] for s, f in freqs.items()) / total
