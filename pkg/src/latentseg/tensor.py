"""Dense tensor with a reverse-mode gradient tape.

Every differentiable op builds its output through :func:`make_node`, which
stores the parent tensors and a closure mapping the output gradient to one
gradient per parent.  :meth:`Tensor.backward` walks the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GradientStateError, NumericError

_grad_enabled = True
_mac_counters: list[list[int]] = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def mac_counter() -> Iterator[list[int]]:
    """Collect multiply-accumulate counts of conv/matmul ops run inside the block.

    Yields a one-element list whose entry is the running total.
    """
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.remove(box)


def add_macs(n: int) -> None:
    for box in _mac_counters:
        box[0] += int(n)


def _as_array(data, dtype) -> np.ndarray:
    # float64 arrays stay float64 (gradient checks); everything else is float32
    keep = isinstance(data, np.ndarray) and data.dtype == np.float64
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if keep else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """N-d array of float32 (or float64 for gradient checks) values.

    Networks pass 4-D ``(N, C, H, W)`` activations; parameters, losses and
    graph-node matrices use whatever rank they need.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if not np.isfinite(self.data).all():
            raise NumericError("tensor contains NaN or Inf")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # Arithmetic sugar; implementations live in functional.
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __mul__(self, other):
        from . import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import functional as F

        return F.sum(self)

    def mean(self) -> "Tensor":
        from . import functional as F

        return F.mean(self)

    def reshape(self, *shape) -> "Tensor":
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Raises if ``self`` is not a scalar, if it was already back-propagated,
        or if a reached leaf still carries a gradient from an earlier pass.
        """
        if self.data.size != 1:
            raise GradientStateError(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GradientStateError("backward already called on this graph")
        if not self.requires_grad:
            raise GradientStateError("loss does not depend on any requires_grad tensor")

        order = _topological_order(self)
        for node in order:
            if node._backward is None and node.requires_grad and node.grad is not None:
                raise GradientStateError("leaf gradient already populated; call zero_grad first")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.astype(node.data.dtype, copy=False)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are needed."""
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out
