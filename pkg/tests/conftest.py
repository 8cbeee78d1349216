import contextlib

import numpy as np
import pytest

from latentseg import functional as F
from latentseg.tensor import Tensor


@contextlib.contextmanager
def relu_patterns():
    """Record the on/off pattern of every ReLU evaluated inside the block."""
    seen = []
    original = F.relu

    def spy(x):
        seen.append((x.data > 0).tobytes())
        return original(x)

    F.relu = spy
    try:
        yield seen
    finally:
        F.relu = original


def numeric_grad(fn, arrays, index, h=1e-3):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn(*arrays)
        x[i] = old - h
        down = fn(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays, h=1e-3):
    """Compare reverse-mode grads of ``build(*tensors)`` with finite differences.

    ``build`` maps float64 Tensors to a scalar Tensor.  Returns the largest
    relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()

    def value(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(value, arrays, k, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def module_gradcheck(module, x, loss=None, h=1e-3, max_entries=40, seed=0, max_kink_fraction=0.1):
    """Finite-difference check of a float64 module's parameter and input grads.

    Large parameters are spot-checked on ``max_entries`` random entries.
    Coordinates whose +-h perturbation flips any ReLU are excluded (the
    central difference straddles a kink there); at most
    ``max_kink_fraction`` of the probed coordinates may be excluded.
    """
    module.to(np.float64)
    loss = loss or (lambda out: F.mean(F.mul(out, out)))
    xt = Tensor(np.array(x, np.float64), requires_grad=True)
    module.zero_grad()
    with relu_patterns() as base:
        loss(module(xt)).backward()
    base = list(base)
    rng = np.random.default_rng(seed)

    def value():
        with relu_patterns() as pat:
            v = float(loss(module(Tensor(xt.data))).data)
        return v, pat == base

    worst = 0.0
    probed = skipped = 0
    targets = [(name, p.data, p.grad) for name, p in module.named_parameters()] + [("input", xt.data, xt.grad)]
    for name, arr, grad in targets:
        grad = np.zeros_like(arr) if grad is None else grad  # unused by this forward
        flat = np.arange(arr.size)
        if arr.size > max_entries:
            flat = rng.choice(arr.size, max_entries, replace=False)
        num, ana = [], []
        for f in flat:
            i = np.unravel_index(f, arr.shape)
            old = arr[i]
            arr[i] = old + h
            up, same_up = value()
            arr[i] = old - h
            down, same_down = value()
            arr[i] = old
            probed += 1
            if not (same_up and same_down):
                skipped += 1
                continue
            num.append((up - down) / (2 * h))
            ana.append(grad[i])
        if num:
            worst = max(worst, rel_error(ana, num))
    assert skipped <= max_kink_fraction * probed, f"{skipped}/{probed} probes straddle a ReLU kink"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
