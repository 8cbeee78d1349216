"""Convolutional compressor / decompressor pair and its training loop."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import functional as F
from .errors import ConfigError, NumericError, ShapeError, ValidationError
from .nn import Conv2d, Module, UpsampleConv2d
from .optim import OptimState, adam_step, step_lr
from .quantizer import fit_params, float2int, int2float
from .tensor import Tensor, make_node, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    d: int = 1
    n: int = 8
    latent_channels: int = 16
    stem_stride: int = 4
    digest_stride: int = 2
    hidden_channels: int = 32

    def __post_init__(self):
        if not 1 <= self.d <= 3:
            raise ConfigError(f"digest depth d must be in 1..3, got {self.d}")
        if not 2 <= self.n <= 8:
            raise ConfigError(f"bit length n must be in 2..8, got {self.n}")
        if self.stem_stride not in (2, 4) or self.digest_stride not in (2, 4):
            raise ConfigError("stem_stride and digest_stride must be 2 or 4")
        if self.latent_channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def downsample(self) -> int:
        return self.stem_stride * self.digest_stride**self.d

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        s = self.downsample
        if h % s or w % s:
            raise ShapeError(f"image {h}x{w} not divisible by downsample factor {s}")
        return (self.latent_channels, h // s, w // s)

    def raw_cf(self) -> float:
        """24 bits/pixel over quantised latent bits per pixel, before entropy coding."""
        return 24.0 * self.downsample**2 / (self.latent_channels * self.n)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "CodecConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"unknown codec config key {key!r}")
            values[key] = int(value)
        return cls(**values)


def _strided_kernel(stride: int) -> tuple[int, int]:
    # kernel/padding giving exactly H/stride outputs for H divisible by stride
    return stride + 1, stride // 2


class Compressor(Module):
    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        k, p = _strided_kernel(config.stem_stride)
        self.stem = Conv2d(3, config.hidden_channels, k, config.stem_stride, p, rng=rng)
        k, p = _strided_kernel(config.digest_stride)
        self.digests = [
            Conv2d(config.hidden_channels, config.hidden_channels, k, config.digest_stride, p, rng=rng)
            for _ in range(config.d)
        ]
        self.head = Conv2d(config.hidden_channels, config.latent_channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.stem(x))
        for conv in self.digests:
            x = F.relu(conv(x))
        return self.head(x)


class Decompressor(Module):
    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        self.entry = Conv2d(config.latent_channels, config.hidden_channels, 1, rng=rng)
        self.stages = [
            UpsampleConv2d(config.hidden_channels, config.hidden_channels, config.digest_stride, rng=rng)
            for _ in range(config.d)
        ]
        self.out = UpsampleConv2d(config.hidden_channels, 3, config.stem_stride, rng=rng)
        # start mid-range so the output clamp passes gradients
        self.out.conv.bias.data[:] = 0.5

    def forward(self, z: Tensor) -> Tensor:
        x = F.relu(self.entry(z))
        for stage in self.stages:
            x = F.relu(stage(x))
        return F.clamp(self.out(x), 0.0, 1.0)


@dataclass
class CodecPair:
    compressor: Compressor | None
    decompressor: Decompressor | None
    config: CodecConfig
    history: list[float] = field(default_factory=list)

    def num_parameters(self) -> dict[str, int]:
        return {
            "compressor": self.compressor.num_parameters() if self.compressor else 0,
            "decompressor": self.decompressor.num_parameters() if self.decompressor else 0,
        }


def build_codec(config: CodecConfig, seed: int = 0) -> CodecPair:
    rng = np.random.default_rng(seed)
    comp = Compressor(config, rng)
    dec = Decompressor(config, rng)
    pair = CodecPair(comp, dec, config)
    log.debug("built codec d=%d params=%s", config.d, pair.num_parameters())
    return pair


def _check_image(pair: CodecPair, x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image batch, got {x.shape}")
    pair.config.latent_shape(x.shape[2], x.shape[3])


def compress_forward(pair: CodecPair, image: Tensor) -> Tensor:
    if pair.compressor is None:
        raise ConfigError("codec has no compressor loaded")
    _check_image(pair, image)
    return pair.compressor(image)


def decompress_forward(pair: CodecPair, latent: Tensor) -> Tensor:
    if pair.decompressor is None:
        raise ConfigError("codec has no decompressor loaded")
    if latent.ndim != 4 or latent.shape[1] != pair.config.latent_channels:
        raise ShapeError(f"latent shape {latent.shape} does not match {pair.config.latent_channels} channels")
    return pair.decompressor(latent)


def straight_through_quantize(latent: Tensor, n: int) -> Tensor:
    """Forward: per-sample quantise/dequantise. Backward: identity."""
    out = np.empty_like(latent.data)
    for i in range(latent.shape[0]):
        sample = latent.data[i]
        out[i] = int2float(float2int(sample, fit_params(sample, n))).data
    return make_node(out, (latent,), lambda g: (g,), "straight_through")


def train_codec(pair: CodecPair, images: np.ndarray, epochs: int = 30, lr: float = 1e-3,
                step_size: int = 10, gamma: float = 0.75, batch_size: int = 1, seed: int = 0,
                quantize_in_loop: bool = False) -> list[float]:
    """Minimise reconstruction MSE with Adam and a step schedule.

    ``images`` is (N, 3, H, W) float32 in [0, 1].  Returns the per-epoch mean
    loss, also appended to ``pair.history``.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValidationError("training set must be a non-empty (N, 3, H, W) array")
    pair.config.latent_shape(images.shape[2], images.shape[3])
    params = pair.compressor.parameters() + pair.decompressor.parameters()
    state = OptimState(lr=lr, step_size=step_size, gamma=gamma)
    rng = np.random.default_rng(seed)
    history: list[float] = []
    for epoch in range(epochs):
        step_lr(state, epoch)
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = Tensor(images[order[start : start + batch_size]])
            for p in params:
                p.grad = None
            try:
                latent = pair.compressor(batch)
                if quantize_in_loop:
                    latent = straight_through_quantize(latent, pair.config.n)
                loss = F.mse_loss(pair.decompressor(latent), batch)
            except NumericError as exc:
                raise NumericError(f"codec training diverged at epoch {epoch}: {exc}") from None
            loss.backward()
            adam_step(params, state)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        log.info("codec epoch %d/%d mse=%.6f lr=%.3g", epoch + 1, epochs, history[-1], state.lr)
    pair.history.extend(history)
    return history


def reconstruct(pair: CodecPair, images: np.ndarray, n: int | None = None) -> np.ndarray:
    """Batch inference: compress, optionally quantise at ``n`` bits, decompress."""
    out = []
    with no_grad():
        for img in np.asarray(images, dtype=np.float32):
            z = compress_forward(pair, Tensor(img[None]))
            if n is not None:
                z = int2float(float2int(z, fit_params(z, n)))
            out.append(decompress_forward(pair, z).data[0])
    return np.stack(out)


CONFIG_FILE = "codec.cfg"
COMPRESSOR_FILE = "compressor.lcw"
DECOMPRESSOR_FILE = "decompressor.lcw"


def save_codec(pair: CodecPair, directory: str | os.PathLike) -> None:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    (path / CONFIG_FILE).write_text(pair.config.to_text())
    if pair.compressor is not None:
        checkpoint.save(path / COMPRESSOR_FILE, pair.compressor.state_dict())
    if pair.decompressor is not None:
        checkpoint.save(path / DECOMPRESSOR_FILE, pair.decompressor.state_dict())


def load_codec(directory: str | os.PathLike, compressor: bool = True, decompressor: bool = True) -> CodecPair:
    """Load only the halves asked for; the other stays ``None`` and is never built."""
    path = Path(directory)
    config = CodecConfig.from_text((path / CONFIG_FILE).read_text())
    rng = np.random.default_rng(0)
    comp = dec = None
    if compressor:
        comp = Compressor(config, rng)
        comp.load_state_dict(checkpoint.load(path / COMPRESSOR_FILE))
    if decompressor:
        dec = Decompressor(config, rng)
        dec.load_state_dict(checkpoint.load(path / DECOMPRESSOR_FILE))
    return CodecPair(comp, dec, config)
