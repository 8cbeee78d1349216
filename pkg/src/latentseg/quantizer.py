"""Affine min/max quantisation of latents onto n-bit integer symbols."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, ValidationError
from .tensor import Tensor


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor range (``delta`` = min, ``Delta`` = max) and bit length.

    Both bounds are held as float32 values, exactly what the container stores.
    """

    delta: float
    Delta: float
    n: int

    def __post_init__(self):
        if not (2 <= self.n <= 8):
            raise ValidationError(f"bit length n must be in [2, 8], got {self.n}")
        d, D = np.float32(self.delta), np.float32(self.Delta)
        if not (np.isfinite(d) and np.isfinite(D)):
            raise ValidationError("quantisation bounds must be finite")
        if d > D:
            raise ValidationError(f"delta {d} > Delta {D}")
        object.__setattr__(self, "delta", float(d))
        object.__setattr__(self, "Delta", float(D))

    @property
    def levels(self) -> int:
        return (1 << self.n) - 1

    @property
    def degenerate(self) -> bool:
        return self.delta == self.Delta


@dataclass
class IntLatent:
    shape: tuple[int, ...]
    symbols: np.ndarray
    params: QuantParams

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64).reshape(-1)
        if self.symbols.size != int(np.prod(self.shape)):
            raise ValidationError(f"{self.symbols.size} symbols do not fill shape {self.shape}")


def fit_params(latent: Tensor | np.ndarray, n: int) -> QuantParams:
    x = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float32)
    if x.size == 0:
        raise ValidationError("cannot fit quantisation range of an empty tensor")
    return QuantParams(float(x.min()), float(x.max()), n)


def fit_params_global(latents, n: int) -> QuantParams:
    """Calibration mode: one range over a whole set of latents."""
    lo = min(float(np.min(l.data if isinstance(l, Tensor) else l)) for l in latents)
    hi = max(float(np.max(l.data if isinstance(l, Tensor) else l)) for l in latents)
    return QuantParams(lo, hi, n)


def float2int(latent: Tensor | np.ndarray, p: QuantParams) -> IntLatent:
    x = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float32)
    shape = tuple(x.shape)
    if p.degenerate:
        return IntLatent(shape, np.zeros(x.size, np.int64), p)
    lo, hi = np.float64(p.delta), np.float64(p.Delta)
    v = p.levels * (x.astype(np.float64) - lo) / (hi - lo)
    q = np.clip(np.rint(v), 0, p.levels).astype(np.int64)
    return IntLatent(shape, q.reshape(-1), p)


def int2float(q: IntLatent) -> Tensor:
    p = q.params
    s = q.symbols
    if s.size and (s.min() < 0 or s.max() > p.levels):
        bad = int(np.argmax((s < 0) | (s > p.levels)))
        raise CorruptionError(f"symbol {int(s[bad])} at index {bad} exceeds {p.levels} for n={p.n}")
    if p.degenerate:
        out = np.full(s.size, np.float32(p.delta), np.float32)
    else:
        lo, hi = np.float64(p.delta), np.float64(p.Delta)
        out = np.clip(s / p.levels * (hi - lo) + lo, lo, hi).astype(np.float32)
    return Tensor(out.reshape(q.shape))


def quantize_roundtrip(latent: Tensor, n: int) -> Tensor:
    """int2float(float2int(latent)) with per-tensor parameters."""
    return int2float(float2int(latent, fit_params(latent, n)))
