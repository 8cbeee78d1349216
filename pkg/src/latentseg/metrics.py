"""Image quality (PSNR, SSIM) and segmentation overlap (Dice)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def _as_unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x.astype(np.float64) / 255.0
    return x.astype(np.float64)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of two single-channel images over valid window positions."""
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM; ``(H, W)`` or ``(H, W, C)`` inputs, channels averaged.

    uint8 inputs are rescaled to [0, 1].
    """
    a, b = _as_unit(a), _as_unit(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ShapeError(f"ssim expects (H, W) or (H, W, 1|3), got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(a, b):
        return 1.0
    vals = [ssim_map(a[:, :, c], b[:, :, c], data_range).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


@dataclass
class DiceResult:
    per_class: np.ndarray  # nan where the class is absent from both maps
    macro: float


def dice(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = 255) -> DiceResult:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    keep = (gt != ignore_label) & (pred != ignore_label)
    p, t = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.max() >= num_classes or t.max() >= num_classes or min(p.min(), t.min()) < 0):
        raise ValidationError(f"dice: labels outside [0, {num_classes})")
    inter = np.bincount(t[p == t], minlength=num_classes).astype(np.float64)
    sizes = np.bincount(p, minlength=num_classes) + np.bincount(t, minlength=num_classes)
    per = np.full(num_classes, np.nan)
    present = sizes > 0
    per[present] = 2.0 * inter[present] / sizes[present]
    macro = float(np.mean(per[present])) if present.any() else float("nan")
    return DiceResult(per, macro)
