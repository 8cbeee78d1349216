"""Quality grid over (d, n) and the segmentation baseline comparison."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .codec import CodecConfig, CodecPair, build_codec, compress_forward, reconstruct, save_codec, train_codec
from .compute import pipeline_report
from .container import compress_image, decompress_blob, serialize
from .data import NUM_CLASSES, extract_patches, generate_synthetic, load_dataset, split_indices
from .errors import ConfigError, LatentSegError
from .imageio import to_tensor_data
from .metrics import dice, psnr, ssim
from .quantizer import quantize_roundtrip
from .segmentation import SegNetConfig, build_segnet, infer, train_seg
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

GRID_COLUMNS = ("d", "n", "cf_raw", "cf_measured", "ssim", "psnr", "status")
BASELINE_COLUMNS = ("method", "dice", "cloud_macs")


@dataclass
class ExperimentSpec:
    seed: int = 0
    data: str | None = None
    count: int = 100
    size: int = 64
    d_values: tuple[int, ...] = (1, 2, 3)
    n_values: tuple[int, ...] = (2, 4, 6, 8)
    codec_patch: int = 64
    seg_patch: int = 64
    epochs: int = 30
    codec_lr: float = 1e-3
    codec_batch: int = 1
    iterations: int = 2000
    seg_optimizer: str = "adam"
    seg_lr: float = 1e-3
    seg_batch: int = 8
    seg_d: int = 1
    seg_n: int = 8
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if not self.d_values or not self.n_values:
            raise ConfigError("grid must contain at least one d and one n")
        s_max = max(4 * 2**d for d in self.d_values)
        for name in ("codec_patch", "seg_patch"):
            if getattr(self, name) % s_max:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by max downsample {s_max}")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown experiment key {key!r}")
            kind = kinds[key]
            if kind.startswith("tuple"):
                parsed[key] = tuple(int(v) for v in str(raw).split(",") if v.strip())
            elif kind == "int":
                parsed[key] = int(raw)
            elif kind == "float":
                parsed[key] = float(raw)
            else:
                parsed[key] = None if raw in (None, "", "none") else str(raw)
        return cls(**parsed)


def read_key_values(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def load_images(spec: ExperimentSpec) -> tuple[list[np.ndarray], list[np.ndarray | None]]:
    if spec.data:
        return load_dataset(spec.data)
    scenes = generate_synthetic(spec.seed, spec.count, spec.size)
    return [s.image for s in scenes], [s.mask for s in scenes]


def _stack_patches(images, masks, patch: int) -> tuple[np.ndarray, np.ndarray | None]:
    imgs, ms = [], []
    for img, m in zip(images, masks):
        for pi, pm in extract_patches(img, m, patch):
            imgs.append(to_tensor_data(pi)[0])
            ms.append(pm)
    x = np.stack(imgs)
    return x, (np.stack(ms) if all(m is not None for m in ms) else None)


def train_codec_for(spec: ExperimentSpec, d: int, train_images, seed: int) -> CodecPair:
    x, _ = _stack_patches(train_images, [None] * len(train_images), spec.codec_patch)
    pair = build_codec(CodecConfig(d=d), seed=seed)
    train_codec(pair, x, epochs=spec.epochs, lr=spec.codec_lr, batch_size=spec.codec_batch, seed=seed)
    return pair


def evaluate_codec(pair: CodecPair, images: list[np.ndarray], n: int) -> dict:
    """Quality and compression of the full file pipeline on ``images``."""
    recs, sizes = [], []
    for img in images:
        blob = compress_image(pair, img, n)
        sizes.append(len(serialize(blob)))
        recs.append(decompress_blob(pair, blob))
    raw = sum(3 * im.shape[0] * im.shape[1] for im in images)
    ref = np.stack(images)
    return {
        "cf_measured": raw / sum(sizes),
        "psnr": psnr(np.stack(recs), ref, 255.0),
        "ssim": float(np.mean([ssim(r, o) for r, o in zip(recs, images)])),
    }


def _grid_cell(args) -> list[dict]:
    spec, index, d, train_images, test_images = args
    rows = []
    cell_seed = spec.seed + index
    try:
        pair = train_codec_for(spec, d, train_images, cell_seed)
        save_codec(pair, Path(spec.out) / f"codec_d{d}")
    except LatentSegError as exc:
        log.warning("grid cell d=%d failed: %s", d, exc)
        return [dict(d=d, n=n, cf_raw=CodecConfig(d=d, n=n).raw_cf(), cf_measured=math.nan,
                     ssim=math.nan, psnr=math.nan, status=f"failed: {exc}") for n in spec.n_values]
    for n in spec.n_values:
        row = dict(d=d, n=n, cf_raw=CodecConfig(d=d, n=n).raw_cf())
        try:
            row.update(evaluate_codec(pair, test_images, n), status="ok")
        except LatentSegError as exc:
            row.update(cf_measured=math.nan, ssim=math.nan, psnr=math.nan, status=f"failed: {exc}")
        rows.append(row)
    return rows


def run_grid(spec: ExperimentSpec) -> list[dict]:
    """One codec per d (seed = base seed + cell index), evaluated at every n
    on the held-out split.  Writes ``grid.csv`` under ``spec.out``."""
    images, _ = load_images(spec)
    train_idx, test_idx = split_indices(len(images))
    train_images = [images[i] for i in train_idx]
    test_images = [images[i] for i in test_idx]
    Path(spec.out).mkdir(parents=True, exist_ok=True)
    jobs = [(spec, i, d, train_images, test_images) for i, d in enumerate(spec.d_values)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_grid_cell, jobs))
    else:
        results = [_grid_cell(job) for job in jobs]
    rows = [row for cell in results for row in cell]
    write_csv(Path(spec.out) / "grid.csv", GRID_COLUMNS, rows)
    return rows


def write_csv(path: str | os.PathLike, columns, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 6))
    return v


def quantized_latents(pair: CodecPair, images: np.ndarray, n: int) -> np.ndarray:
    """What the cloud receives: int2float(float2int(net_C(I))) per image."""
    out = []
    with no_grad():
        for img in images:
            out.append(quantize_roundtrip(compress_forward(pair, Tensor(img[None])), n).data[0])
    return np.stack(out)


@dataclass
class BaselineResult:
    rows: list[dict]
    nets: dict = field(default_factory=dict)


def run_baselines(spec: ExperimentSpec, codec: CodecPair | None = None) -> BaselineResult:
    """Train and evaluate BL1-BL3 and the latent-domain network on one split.

    JPEG (BL4) is deliberately absent.  Writes ``baselines.csv``.
    """
    images, masks = load_images(spec)
    if any(m is None for m in masks):
        raise ConfigError("baselines need a segmentation mask for every image")
    train_idx, test_idx = split_indices(len(images))
    x_tr, m_tr = _stack_patches([images[i] for i in train_idx], [masks[i] for i in train_idx], spec.seg_patch)
    x_te, m_te = _stack_patches([images[i] for i in test_idx], [masks[i] for i in test_idx], spec.seg_patch)
    if codec is None:
        cx, _ = _stack_patches([images[i] for i in train_idx], [None] * len(train_idx), spec.codec_patch)
        codec = build_codec(CodecConfig(d=spec.seg_d, n=spec.seg_n), seed=spec.seed)
        train_codec(codec, cx, epochs=spec.epochs, lr=spec.codec_lr, batch_size=spec.codec_batch, seed=spec.seed)
    if codec.decompressor is None or codec.compressor is None:
        raise ConfigError("baselines need a full codec (compressor and decompressor)")
    n = spec.seg_n
    z_tr, z_te = quantized_latents(codec, x_tr, n), quantized_latents(codec, x_te, n)
    r_tr, r_te = reconstruct(codec, x_tr, n), reconstruct(codec, x_te, n)

    def fit(mode: str, inputs: np.ndarray):
        net = build_segnet(SegNetConfig.for_codec(codec.config, mode), seed=spec.seed)
        train_seg(net, inputs, m_tr, iterations=spec.iterations, optimizer=spec.seg_optimizer,
                  lr=spec.seg_lr, batch_size=spec.seg_batch, seed=spec.seed)
        return net

    def score(net, inputs) -> float:
        return dice(infer(net, inputs), m_te, NUM_CLASSES).macro

    bl1 = fit("image", x_tr)
    bl3 = fit("image", r_tr)
    latent = fit("latent", z_tr)
    report = pipeline_report(codec, latent, bl1, (spec.seg_patch, spec.seg_patch))
    rows = [
        dict(method="BL1", dice=score(bl1, x_te), cloud_macs=report.cloud_macs("BL1")),
        dict(method="BL2", dice=score(bl1, r_te), cloud_macs=report.cloud_macs("BL2")),
        dict(method="BL3", dice=score(bl3, r_te), cloud_macs=report.cloud_macs("BL3")),
        dict(method="proposed", dice=score(latent, z_te), cloud_macs=report.cloud_macs("proposed")),
    ]
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "baselines.csv", BASELINE_COLUMNS, rows)
    return BaselineResult(rows, {"BL1": bl1, "BL3": bl3, "proposed": latent, "codec": codec})
