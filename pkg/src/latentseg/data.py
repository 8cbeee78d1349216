"""Synthetic scenes, on-disk datasets and patch extraction."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .imageio import read_pgm, read_ppm, write_pnm

NUM_CLASSES = 4
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
BASE_COLORS = {
    1: (215.0, 60.0, 55.0),
    2: (60.0, 195.0, 75.0),
    3: (70.0, 95.0, 225.0),
}


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8
    shapes: list[tuple[int, tuple[float, ...]]] = field(default_factory=list)


def _centres(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def rasterize(cls: int, geom: tuple[float, ...], size: int) -> np.ndarray:
    """Boolean coverage of one shape, sampled at pixel centres."""
    xs, ys = _centres(size)
    if cls == 1:
        cx, cy, r = geom
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if cls == 2:
        x0, y0, x1, y1 = geom
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if cls == 3:
        ax, ay, bx, by, cx, cy = geom
        # barycentric test
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        l1 = ((by - cy) * (xs - cx) + (cx - bx) * (ys - cy)) / den
        l2 = ((cy - ay) * (xs - cx) + (ax - cx) * (ys - cy)) / den
        l3 = 1.0 - l1 - l2
        return (l1 >= 0) & (l2 >= 0) & (l3 >= 0)
    raise ValidationError(f"unknown shape class {cls}")


def _random_shape(rng: np.random.Generator, size: int) -> tuple[int, tuple[float, ...]]:
    cls = int(rng.integers(1, NUM_CLASSES))
    cx, cy = rng.uniform(0.15 * size, 0.85 * size, 2)
    if cls == 1:
        return cls, (cx, cy, rng.uniform(0.12, 0.24) * size)
    if cls == 2:
        w, h = rng.uniform(0.22, 0.45, 2) * size
        return cls, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    r = rng.uniform(0.18, 0.32) * size
    a0 = rng.uniform(0, 2 * np.pi)
    angles = a0 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.35, 0.35, 3)
    pts = []
    for a in angles:
        pts += [cx + r * np.cos(a), cy + r * np.sin(a)]
    return cls, tuple(pts)


def make_scene(rng: np.random.Generator, size: int) -> SyntheticScene:
    ys, xs = np.mgrid[0:size, 0:size] / size
    bg = rng.uniform(70, 130, 3)
    tilt = rng.uniform(-25, 25, 2)
    img = bg[None, None, :] + (tilt[0] * xs + tilt[1] * ys)[:, :, None]
    mask = np.zeros((size, size), np.uint8)
    shapes = [_random_shape(rng, size) for _ in range(int(rng.integers(1, 4)))]
    for cls, geom in shapes:
        cover = rasterize(cls, geom, size)
        color = np.asarray(BASE_COLORS[cls]) + rng.uniform(-20, 20, 3)
        img[cover] = color
        mask[cover] = cls
    img = img + rng.normal(0.0, 2.0, img.shape)
    return SyntheticScene(np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, shapes)


def generate_synthetic(seed: int, count: int, size: int = 64) -> list[SyntheticScene]:
    if size % 32:
        raise ConfigError(f"synthetic image size must be divisible by 32, got {size}")
    if count < 1:
        raise ConfigError("count must be positive")
    return [make_scene(np.random.default_rng([seed, i]), size) for i in range(count)]


def write_dataset(root: str | os.PathLike, scenes: list[SyntheticScene]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        write_pnm(root / "images" / f"{i:04d}.ppm", scene.image)
        write_pnm(root / "masks" / f"{i:04d}.pgm", scene.mask)
    return root


def load_dataset(root: str | os.PathLike) -> tuple[list[np.ndarray], list[np.ndarray | None]]:
    """Images sorted by filename, with the same-stem mask when present."""
    root = Path(root)
    paths = sorted((root / "images").glob("*.ppm"))
    if not paths:
        raise ValidationError(f"no images found under {root / 'images'}")
    images, masks = [], []
    for p in paths:
        images.append(read_ppm(p))
        m = root / "masks" / (p.stem + ".pgm")
        masks.append(read_pgm(m) if m.exists() else None)
    return images, masks


def split_indices(count: int, train_fraction: float = 0.8) -> tuple[list[int], list[int]]:
    """Leading 80% train, trailing 20% held out (at least one of each when count > 1)."""
    n_train = int(round(count * train_fraction))
    if count > 1:
        n_train = min(max(n_train, 1), count - 1)
    return list(range(n_train)), list(range(n_train, count))


def extract_patches(image: np.ndarray, mask: np.ndarray | None = None, patch: int = 64,
                    non_overlapping: bool = True) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Grid tiling; partial edge tiles are discarded.

    Overlapping mode steps by half a patch.
    """
    h, w = image.shape[:2]
    if patch > h or patch > w:
        raise ShapeError(f"patch {patch} larger than image {h}x{w}")
    if mask is not None and mask.shape != (h, w):
        raise ShapeError(f"mask {mask.shape} does not match image {h}x{w}")
    step = patch if non_overlapping else max(patch // 2, 1)
    out = []
    for y in range(0, h - patch + 1, step):
        for x in range(0, w - patch + 1, step):
            img = image[y : y + patch, x : x + patch].copy()
            m = mask[y : y + patch, x : x + patch].copy() if mask is not None else None
            out.append((img, m))
    return out
