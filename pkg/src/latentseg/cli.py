"""Command-line entry point: ``latentseg <command> [options]``.

Every option may also come from ``--config FILE`` (plain ``key=value``
lines); flags given on the command line win.  Failures print a single
``error: category=<Class> message=<text>`` line and exit with status 1.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, data
from .codec import CodecConfig, build_codec, load_codec, reconstruct, save_codec, train_codec
from .compute import pipeline_report, write_report_csv
from .errors import ConfigError, LatentSegError
from .experiments import (
    ExperimentSpec,
    evaluate_codec,
    quantized_latents,
    read_key_values,
    run_baselines,
    run_grid,
    write_csv,
)
from .imageio import read_ppm, to_tensor_data, write_pnm
from .metrics import dice
from .segmentation import SegNetConfig, build_segnet, infer, load_segnet, save_segnet, train_seg
from .tensor import Tensor

log = logging.getLogger("latentseg")

EVAL_COLUMNS = ("mode", "d", "n", "images", "dice", "psnr", "ssim", "cf_measured")

_DEFAULTS = {
    "seed": 0, "out": None, "d": 1, "n": 8, "mode": "latent", "codec": None, "seg": None,
    "data": None, "count": 100, "size": 64, "epochs": 30, "iterations": 2000, "lr": None,
    "batch_size": None, "decompressed": False, "workers": 1,
}
_INTS = {"seed", "d", "n", "count", "size", "epochs", "iterations", "batch_size", "workers"}


class Options:
    """Resolved options: command line, then config file, then built-in default."""

    def __init__(self, args: argparse.Namespace, config: dict[str, str]):
        self._args = args
        self._config = config

    def __getattr__(self, name: str):
        value = getattr(self._args, name, None)
        if value is not None and value is not False:
            return value
        if name in self._config:
            raw = self._config[name]
            if name in _INTS:
                return int(raw)
            if name == "lr":
                return float(raw)
            if name == "decompressed":
                return raw.lower() in ("1", "true", "yes")
            return raw
        return _DEFAULTS.get(name)

    def require(self, name: str):
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
        return value


def _spec(opts: Options, config: dict[str, str], **overrides) -> ExperimentSpec:
    values = dict(config)
    values.setdefault("seed", str(opts.seed))
    values.setdefault("count", str(opts.count))
    values.setdefault("size", str(opts.size))
    values.setdefault("epochs", str(opts.epochs))
    values.setdefault("iterations", str(opts.iterations))
    if opts.data:
        values["data"] = opts.data
    if opts.out:
        values["out"] = opts.out
    for flag in ("seed", "count", "size", "epochs", "iterations", "workers"):
        explicit = getattr(opts._args, flag, None)
        if explicit is not None:
            values[flag] = str(explicit)
    for key, value in overrides.items():
        if value is not None:
            values[key] = ",".join(map(str, value)) if isinstance(value, list) else str(value)
    known = set(ExperimentSpec.__dataclass_fields__)
    return ExperimentSpec.from_mapping({k: v for k, v in values.items() if k in known})


def _codec_for(opts: Options, d: int | None = None, decompressor: bool = True, compressor: bool = True):
    """Load ``--codec`` or build a fresh codec from ``--seed`` and ``--d``."""
    if opts.codec:
        return load_codec(opts.codec, compressor=compressor, decompressor=decompressor)
    return build_codec(CodecConfig(d=d if d is not None else opts.d, n=opts.n), seed=opts.seed)


def cmd_gen_data(opts: Options, config) -> int:
    out = opts.require("out")
    scenes = data.generate_synthetic(opts.seed, opts.count, opts.size)
    data.write_dataset(out, scenes)
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def _training_images(opts: Options):
    images, masks = data.load_dataset(opts.require("data"))
    train_idx, test_idx = data.split_indices(len(images))
    return images, masks, train_idx, test_idx


def _patch_stack(images, masks, patch):
    imgs, ms = [], []
    for img, m in zip(images, masks):
        for pi, pm in data.extract_patches(img, m, patch):
            imgs.append(to_tensor_data(pi)[0])
            ms.append(pm)
    return np.stack(imgs), ms


def cmd_train_codec(opts: Options, config) -> int:
    out = opts.require("out")
    images, _, train_idx, _ = _training_images(opts)
    cfg = CodecConfig(d=opts.d, n=opts.n)
    patch = int(config.get("codec_patch", opts.size))
    x, _ = _patch_stack([images[i] for i in train_idx], [None] * len(train_idx), patch)
    pair = build_codec(cfg, seed=opts.seed)
    history = train_codec(pair, x, epochs=opts.epochs, lr=opts.lr or 1e-3,
                          batch_size=opts.batch_size or 1, seed=opts.seed)
    save_codec(pair, out)
    print(f"codec d={cfg.d} trained: mse {history[0]:.6f} -> {history[-1]:.6f}; saved to {out}")
    return 0


def cmd_compress(opts: Options, config) -> int:
    pair = _codec_for(opts, decompressor=False)
    img = read_ppm(opts.input)
    size = container.write_blob(opts.output, container.compress_image(pair, img, opts.n))
    cf = container.compression_factor(img.shape[0], img.shape[1], size)
    print(f"wrote {opts.output}: {size} bytes, cf={cf:.3f}, cf_raw={CodecConfig(d=pair.config.d, n=opts.n).raw_cf():.3f}")
    return 0


def cmd_decompress(opts: Options, config) -> int:
    blob = container.read_blob(opts.input)
    pair = _codec_for(opts, d=blob.d if not opts.codec else None, compressor=False)
    image = container.decompress_blob(pair, blob)
    write_pnm(opts.output, image)
    print(f"wrote {opts.output}: {image.shape[1]}x{image.shape[0]}")
    return 0


def cmd_train_seg(opts: Options, config) -> int:
    out = opts.require("out")
    images, masks, train_idx, _ = _training_images(opts)
    if any(masks[i] is None for i in train_idx):
        raise ConfigError("segmentation training needs a mask for every training image")
    patch = int(config.get("seg_patch", opts.size))
    x, ms = _patch_stack([images[i] for i in train_idx], [masks[i] for i in train_idx], patch)
    m = np.stack(ms)
    mode = opts.mode
    if mode == "latent":
        pair = _codec_for(opts, decompressor=False)
        inputs = quantized_latents(pair, x, opts.n)
    elif opts.decompressed:
        pair = _codec_for(opts)
        inputs = reconstruct(pair, x, opts.n)
    else:
        inputs = x
        pair = None
    codec_cfg = pair.config if pair is not None else CodecConfig(d=opts.d, n=opts.n)
    net = build_segnet(SegNetConfig.for_codec(codec_cfg, mode), seed=opts.seed)
    history = train_seg(net, inputs, m, iterations=opts.iterations, lr=opts.lr or 1e-3,
                        batch_size=opts.batch_size or 8, seed=opts.seed)
    save_segnet(net, out)
    print(f"{mode}-mode network trained: ce {history[0]:.4f} -> {history[-1]:.4f}; saved to {out}")
    return 0


def _seg_for(opts: Options, d: int):
    if opts.seg:
        return load_segnet(opts.seg)
    return build_segnet(SegNetConfig.for_codec(CodecConfig(d=d, n=opts.n), opts.mode), seed=opts.seed)


def cmd_segment(opts: Options, config) -> int:
    """Latent mode reads a container and never touches a decompressor."""
    if opts.mode == "latent":
        blob = container.read_blob(opts.input)
        net = _seg_for(opts, blob.d)
        if net.config.mode != "latent":
            raise ConfigError("--seg holds an image-mode network but --mode latent was requested")
        x = container.latent_from_blob(blob)
    else:
        net = _seg_for(opts, opts.d)
        if net.config.mode != "image":
            raise ConfigError("--seg holds a latent-mode network but --mode image was requested")
        x = Tensor(to_tensor_data(read_ppm(opts.input)))
    mask = infer(net, x.data)[0]
    write_pnm(opts.output, mask)
    print(f"wrote {opts.output}: classes {sorted(int(c) for c in np.unique(mask))}")
    return 0


def cmd_eval(opts: Options, config) -> int:
    """Held-out Dice for ``--seg`` plus codec quality when ``--codec`` is given."""
    out = Path(opts.require("out"))
    images, masks, _, test_idx = _training_images(opts)
    test_images = [images[i] for i in test_idx]
    row = {"mode": opts.mode, "d": opts.d, "n": opts.n, "images": len(test_idx)}
    pair = load_codec(opts.codec, decompressor=opts.mode != "latent") if opts.codec else None
    if pair is not None:
        row["d"] = pair.config.d
        if pair.decompressor is not None:
            row.update(evaluate_codec(pair, test_images, opts.n))
    if opts.seg:
        net = load_segnet(opts.seg)
        x = np.stack([to_tensor_data(im)[0] for im in test_images])
        if net.config.mode == "latent":
            if pair is None:
                raise ConfigError("--codec is required to evaluate a latent-mode network")
            x = quantized_latents(pair, x, opts.n)
        gt = np.stack([masks[i] for i in test_idx])
        row["mode"] = net.config.mode
        row["dice"] = dice(infer(net, x), gt, net.config.num_classes).macro
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", EVAL_COLUMNS, [row])
    print(", ".join(f"{k}={row[k]}" for k in EVAL_COLUMNS if k in row))
    return 0


def cmd_grid(opts: Options, config) -> int:
    overrides = {}
    if opts._args.d is not None:
        overrides["d_values"] = opts._args.d
    if opts._args.n is not None:
        overrides["n_values"] = opts._args.n
    spec = _spec(opts, config, **overrides)
    rows = run_grid(spec)
    for r in rows:
        print(f"d={r['d']} n={r['n']} cf_raw={r['cf_raw']:.2f} cf={r['cf_measured']:.2f} "
              f"ssim={r['ssim']:.4f} psnr={r['psnr']:.2f} {r['status']}")
    return 0


def cmd_baselines(opts: Options, config) -> int:
    overrides = {"seg_d": opts._args.d, "seg_n": opts._args.n}
    spec = _spec(opts, config, **overrides)
    codec = load_codec(opts.codec) if opts.codec else None
    result = run_baselines(spec, codec)
    for r in result.rows:
        print(f"{r['method']}: dice={r['dice']:.4f} cloud_macs={r['cloud_macs']}")
    return 0


def cmd_report(opts: Options, config) -> int:
    out = Path(opts.require("out"))
    h = w = opts.size
    codec = load_codec(opts.codec) if opts.codec else build_codec(CodecConfig(d=opts.d, n=opts.n), seed=opts.seed)
    cfg = codec.config
    latent = load_segnet(opts.seg) if opts.seg else build_segnet(SegNetConfig.for_codec(cfg, "latent"), opts.seed)
    image = build_segnet(SegNetConfig.for_codec(cfg, "image"), opts.seed)
    report = pipeline_report(codec, latent, image, (h, w))
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "compute.csv", report)
    for row in report.rows():
        print(f"{row['pipeline']}: edge={row['edge_macs']} cloud={row['cloud_macs']} total={row['total_macs']}")
    print(f"cloud saving vs BL3: {report.saving_pct('BL3', 'cloud'):.2f}%")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a seeded synthetic dataset (PPM images, PGM masks)", ()),
    "train-codec": (cmd_train_codec, "train a compressor/decompressor pair", ()),
    "compress": (cmd_compress, "image.ppm -> container.lcr", ("input", "output")),
    "decompress": (cmd_decompress, "container.lcr -> image.ppm", ("input", "output")),
    "train-seg": (cmd_train_seg, "train a segmentation network on images or latents", ()),
    "segment": (cmd_segment, "predict a PGM mask from a container (latent) or image", ("input", "output")),
    "eval": (cmd_eval, "held-out Dice and codec quality to eval.csv", ()),
    "grid": (cmd_grid, "quality/compression grid over d and n to grid.csv", ()),
    "baselines": (cmd_baselines, "BL1-BL3 and the latent method to baselines.csv", ()),
    "report": (cmd_report, "parameter and MAC accounting to compute.csv", ()),
}


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentseg", description="Learned compression with compressed-domain segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, positionals) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        for pos in positionals:
            p.add_argument(pos)
        p.add_argument("--config", help="key=value file supplying defaults for any option")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        multi = name in ("grid",)
        p.add_argument("--d", type=_int_list if multi else int, help="digest units (grid: comma list)")
        p.add_argument("--n", type=_int_list if multi else int, help="bit length (grid: comma list)")
        p.add_argument("--mode", choices=("image", "latent"))
        p.add_argument("--codec", help="codec directory")
        p.add_argument("--seg", help="segmentation network directory")
        p.add_argument("--data", help="dataset directory with images/ and masks/")
        p.add_argument("--count", type=int)
        p.add_argument("--size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--decompressed", action="store_true",
                       help="train-seg: train the image-mode network on decompressed images")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = read_key_values(args.config) if args.config else {}
        return COMMANDS[args.command][0](Options(args, config), config)
    except (LatentSegError, OSError, ValueError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: category={type(exc).__name__} message={message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
