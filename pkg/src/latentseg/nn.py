"""Parameter containers and the layer modules built on :mod:`functional`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(f"state dict mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, bias: bool = True, zero_init: bool = False):
        if min(cin, cout, kernel, stride) < 1:
            raise ConfigError(f"invalid conv geometry cin={cin} cout={cout} k={kernel} stride={stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (cout, cin, kernel, kernel)
        w = np.zeros(shape, np.float32) if zero_init else kaiming_uniform(rng, shape, cin * kernel * kernel)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(cout, np.float32)) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class UpsampleConv2d(Module):
    """Nearest-neighbour upsample followed by a size-preserving conv."""

    def __init__(self, cin: int, cout: int, factor: int, kernel: int = 3,
                 rng: np.random.Generator | None = None):
        if factor not in (2, 4):
            raise ConfigError(f"upsample factor must be 2 or 4, got {factor}")
        self.factor = factor
        self.conv = Conv2d(cin, cout, kernel, 1, kernel // 2, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return F.upsample_conv2d(x, self.conv.weight, self.conv.bias, self.factor)
