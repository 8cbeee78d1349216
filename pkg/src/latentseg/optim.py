"""SGD / Adam updates and a step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GradientStateError
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float
    lr0: float | None = None
    step_size: int = 10
    gamma: float = 0.75
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr0 is None:
            self.lr0 = self.lr


def _grads(params: list[Tensor]) -> list[np.ndarray]:
    out = []
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientStateError(f"parameter {i} with shape {p.shape} has no gradient")
        out.append(p.grad)
    return out


def sgd_step(params: list[Tensor], state: OptimState) -> None:
    grads = _grads(params)
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.momentum:
            buf = state.buffers.get(i)
            if buf is None:
                buf = [np.zeros_like(p.data)]
                state.buffers[i] = buf
            buf[0] = state.momentum * buf[0] + g
            g = buf[0]
        p.data = (p.data - state.lr * g).astype(p.dtype)


def adam_step(params: list[Tensor], state: OptimState) -> None:
    grads = _grads(params)
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        buf = state.buffers.get(i)
        if buf is None:
            buf = [np.zeros_like(p.data), np.zeros_like(p.data)]
            state.buffers[i] = buf
        m, v = buf
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def step_lr(state: OptimState, epoch: int) -> None:
    """Set lr to lr0 * gamma ** (epoch // step_size)."""
    state.lr = state.lr0 * state.gamma ** (epoch // state.step_size)
