"""Differentiable ops on :class:`~latentseg.tensor.Tensor`.

Shapes must match exactly for elementwise ops; there is no broadcasting
apart from the bias of :func:`conv2d` and a 2-D operand of :func:`matmul`.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, ShapeError, ValidationError
from .tensor import Tensor, add_macs, make_node


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return make_node(out, (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return make_node(out, (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_node(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of 3-D operands; either side may be a 2-D matrix
    shared across the batch."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    add_macs(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if a.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if b.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward, "softmax")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cin}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} padding={padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, shape=(c, k, k, n, ho, wo), strides=(s1, s2, s3, s0, s2 * stride, s3 * stride), writeable=False)
    cols = view.reshape(c * k * k, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    add_macs(cout * cin * k * k * ho * wo * n)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward, "upsample_nearest")


def upsample_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsample by ``factor`` then a 'same' convolution."""
    if factor not in (2, 4):
        raise ConfigError(f"upsample_conv2d supports factor 2 or 4, got {factor}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigError("upsample_conv2d needs an odd kernel to preserve size")
    return conv2d(upsample_nearest(x, factor), weight, bias, stride=1, padding=k // 2)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (factor * factor))

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * inv,)

    return make_node(out, (x,), backward, "avg_pool2d")


def _bilinear_matrix(src: int, dst: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((dst, src), dtype=np.float64)
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    ry = _bilinear_matrix(h, out_h, x.dtype)
    rx = _bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", ry, g, rx, optimize=True),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "resize_bilinear")


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mse_loss")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def backward(g):
        d = (2.0 * float(g) / n) * diff
        return d.astype(a.dtype), (-d).astype(b.dtype)

    return make_node(out, (a, b), backward, "mse_loss")


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[target]."""
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy expects (N, K, H, W) logits, got {logits.shape}")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {(n, h, w)}")
    valid = target != ignore_label
    if np.any(target[valid] < 0) or np.any(target[valid] >= k):
        raise ValidationError(f"cross_entropy: target class outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        raise ValidationError("cross_entropy: every pixel is ignored")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    out = np.asarray(-(picked * valid).sum() / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        p *= valid[:, None] * (float(g) / count)
        return (p.astype(logits.dtype),)

    return make_node(out, (logits,), backward, "cross_entropy")
