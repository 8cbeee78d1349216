"""Segmentation networks for images and for quantised latents.

Both modes share the same decoder (``SegDecoder``): a small residual backbone,
a dual-graph context head and a 1x1 classifier whose logits are bilinearly
resized to the original image resolution.  Image mode prepends an encoder
with the compressor's geometry so that both modes see the same spatial grid.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import functional as F
from .codec import CodecConfig, Compressor
from .errors import ConfigError, NumericError, ShapeError, ValidationError
from .nn import Conv2d, Module, parameter
from .optim import OptimState, adam_step, sgd_step
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

IGNORE_LABEL = 255


@dataclass(frozen=True)
class SegNetConfig:
    mode: str = "latent"
    num_classes: int = 4
    latent_channels: int = 16
    width: int = 32
    blocks: int = 2
    head: str = "dual_graph"
    knodes: int = 16
    d: int = 1
    stem_stride: int = 4
    digest_stride: int = 2
    encoder_hidden: int = 32

    def __post_init__(self):
        if self.mode not in ("image", "latent"):
            raise ConfigError(f"mode must be 'image' or 'latent', got {self.mode!r}")
        if self.head not in ("dual_graph", "plain_conv"):
            raise ConfigError(f"head must be 'dual_graph' or 'plain_conv', got {self.head!r}")
        if self.knodes < 1:
            raise ConfigError("knodes must be >= 1")
        if self.num_classes < 2 or self.width < 1 or self.blocks < 1:
            raise ConfigError("num_classes >= 2, width >= 1 and blocks >= 1 required")

    @property
    def in_channels(self) -> int:
        return 3 if self.mode == "image" else self.latent_channels

    @property
    def downsample(self) -> int:
        return self.codec_config().downsample

    def codec_config(self) -> CodecConfig:
        return CodecConfig(d=self.d, latent_channels=self.latent_channels, stem_stride=self.stem_stride,
                           digest_stride=self.digest_stride, hidden_channels=self.encoder_hidden)

    @classmethod
    def for_codec(cls, codec: CodecConfig, mode: str, **kwargs) -> "SegNetConfig":
        return cls(mode=mode, latent_channels=codec.latent_channels, d=codec.d, stem_stride=codec.stem_stride,
                   digest_stride=codec.digest_stride, encoder_hidden=codec.hidden_channels, **kwargs)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SegNetConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(f"unknown segmentation config key {key!r}")
            values[key] = value if types[key] == "str" else int(value)
        return cls(**values)


class ResidualBlock(Module):
    """Two 3x3 convs plus a skip path (1x1 projection when widths differ)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.proj = Conv2d(cin, cout, 1, rng=rng, bias=False) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        skip = self.proj(x) if self.proj is not None else x
        return skip + self.conv2(F.relu(self.conv1(x)))


class ResNetSm(Module):
    def __init__(self, in_channels: int, width: int, blocks: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.stem = Conv2d(in_channels, width, 3, 1, 1, rng=rng)
        self.blocks = [ResidualBlock(width, width, rng) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"backbone expects {self.in_channels} input channels, got shape {x.shape}")
        x = F.relu(self.stem(x))
        for block in self.blocks:
            x = block(x)
        return x


def build_resnet_sm(config: SegNetConfig, seed: int = 0) -> ResNetSm:
    return ResNetSm(config.latent_channels, config.width, config.blocks, np.random.default_rng(seed))


def _bt(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 2, 1))


class DualGraphHead(Module):
    """Residual sum of a coordinate-space and a feature-space graph branch.

    Coordinate branch: 2x average pool, 1x1 projection, one propagation step
    over pixel nodes with a softmax affinity of the projected features,
    1x1 output conv, nearest upsample.

    Feature branch: softmax assignment of pixels to ``knodes`` nodes, node
    update ``relu((I - A) V W)``, re-projection by the transposed assignment,
    1x1 output conv.  Both output convs start at zero so the head is the
    identity at initialisation.
    """

    def __init__(self, channels: int, knodes: int = 16, rng: np.random.Generator | None = None):
        if knodes < 1:
            raise ConfigError("knodes must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        reduced = max(channels // 2, 1)
        self.knodes = knodes
        self.reduced = reduced
        self.coord_proj = Conv2d(channels, reduced, 1, rng=rng)
        self.coord_out = Conv2d(reduced, channels, 1, rng=rng, zero_init=True)
        self.assign = Conv2d(channels, knodes, 1, rng=rng)
        self.feat_proj = Conv2d(channels, reduced, 1, rng=rng)
        self.adjacency = parameter(rng.normal(0.0, 0.1, (knodes, knodes)).astype(np.float32))
        self.node_weight = parameter(
            rng.uniform(-1, 1, (reduced, reduced)).astype(np.float32) * np.float32(np.sqrt(3.0 / reduced))
        )
        self.feat_out = Conv2d(reduced, channels, 1, rng=rng, zero_init=True)

    def assignment(self, x: Tensor) -> Tensor:
        """Per-pixel softmax over graph nodes, shape (N, knodes, H, W)."""
        return F.softmax(self.assign(x), axis=1)

    def coordinate_branch(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        pooled = h % 2 == 0 and w % 2 == 0
        xd = F.avg_pool2d(x, 2) if pooled else x
        hd, wd = xd.shape[2], xd.shape[3]
        v = F.reshape(self.coord_proj(xd), (n, self.reduced, hd * wd))
        affinity = F.scale(F.matmul(_bt(v), v), 1.0 / np.sqrt(self.reduced))
        adj = F.softmax(affinity, axis=2)
        g = F.relu(F.matmul(v, _bt(adj)))
        out = self.coord_out(F.reshape(g, (n, self.reduced, hd, wd)))
        return F.upsample_nearest(out, 2) if pooled else out

    def feature_branch(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        p = h * w
        b = F.reshape(self.assignment(x), (n, self.knodes, p))
        xr = F.reshape(self.feat_proj(x), (n, self.reduced, p))
        nodes = F.scale(F.matmul(b, _bt(xr)), 1.0 / p)
        eye = Tensor(np.eye(self.knodes, dtype=x.dtype))
        mixed = F.matmul(F.sub(eye, self.adjacency), nodes)
        updated = F.relu(F.matmul(mixed, self.node_weight))
        back = _bt(F.matmul(_bt(b), updated))
        return self.feat_out(F.reshape(back, (n, self.reduced, h, w)))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.coordinate_branch(x) + self.feature_branch(x)


def dual_graph_head(x: Tensor, head: DualGraphHead) -> Tensor:
    return head(x)


class SegDecoder(Module):
    """Backbone, context head and classifier operating on the latent grid."""

    def __init__(self, config: SegNetConfig, rng: np.random.Generator):
        self.backbone = ResNetSm(config.latent_channels, config.width, config.blocks, rng)
        if config.head == "dual_graph":
            self.head = DualGraphHead(config.width, config.knodes, rng)
        else:
            self.head = Conv2d(config.width, config.width, 3, rng=rng)
        self.classifier = Conv2d(config.width, config.num_classes, 1, rng=rng)
        self.plain = config.head == "plain_conv"

    def forward(self, x: Tensor) -> Tensor:
        feats = self.backbone(x)
        feats = F.relu(self.head(feats)) if self.plain else self.head(feats)
        return self.classifier(feats)


class SegNet(Module):
    def __init__(self, config: SegNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        # image mode: stride-s encoder with the compressor's geometry
        self.encoder = Compressor(config.codec_config(), rng) if config.mode == "image" else None
        self.decoder = SegDecoder(config, rng)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"{cfg.mode}-mode network expects {cfg.in_channels} channels, got shape {x.shape}")
        s = cfg.downsample
        if self.encoder is not None:
            cfg.codec_config().latent_shape(x.shape[2], x.shape[3])
            out_h, out_w = x.shape[2], x.shape[3]
            x = self.encoder(x)
        else:
            out_h, out_w = x.shape[2] * s, x.shape[3] * s
        return F.resize_bilinear(self.decoder(x), out_h, out_w)


def build_segnet(config: SegNetConfig, seed: int = 0) -> SegNet:
    return SegNet(config, seed)


def segment(net: SegNet, x: Tensor) -> Tensor:
    """Logits (N, K, H, W) at the original image resolution."""
    return net(x)


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.uint8)


def infer(net: SegNet, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            preds.append(predict(net(Tensor(inputs[start : start + batch_size]))))
    return np.concatenate(preds)


def validate_masks(masks: np.ndarray, num_classes: int, ignore_label: int = IGNORE_LABEL) -> None:
    bad = (masks >= num_classes) & (masks != ignore_label)
    if np.any(bad):
        raise ValidationError(f"mask values outside [0, {num_classes}) and not {ignore_label}")


def train_seg(net: SegNet, inputs: np.ndarray, masks: np.ndarray, iterations: int = 2000,
              optimizer: str = "adam", lr: float = 1e-3, momentum: float = 0.9, batch_size: int = 8,
              seed: int = 0, log_every: int = 100) -> list[float]:
    """Minibatch cross-entropy training.

    ``inputs`` are images (N, 3, H, W) in image mode or dequantised latents
    (N, C, H/s, W/s) in latent mode; ``masks`` are (N, H, W) class indices.
    Returns the per-iteration loss.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    masks = np.asarray(masks)
    if len(inputs) == 0 or len(inputs) != len(masks):
        raise ValidationError("training pairs must be non-empty and aligned")
    validate_masks(masks, net.config.num_classes)
    params = net.parameters()
    state = OptimState(lr=lr, momentum=momentum if optimizer == "sgd" else 0.0)
    step = sgd_step if optimizer == "sgd" else adam_step
    if optimizer not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    rng = np.random.default_rng(seed)
    history: list[float] = []
    for it in range(iterations):
        idx = rng.choice(len(inputs), size=min(batch_size, len(inputs)), replace=False)
        net.zero_grad()
        try:
            loss = F.cross_entropy(net(Tensor(inputs[idx])), masks[idx], IGNORE_LABEL)
        except NumericError as exc:
            raise NumericError(f"segmentation training diverged at iteration {it}: {exc}") from None
        loss.backward()
        step(params, state)
        history.append(float(loss.data))
        if log_every and (it + 1) % log_every == 0:
            log.info("seg iter %d/%d ce=%.4f", it + 1, iterations, np.mean(history[-log_every:]))
    return history


CONFIG_FILE = "segnet.cfg"
WEIGHTS_FILE = "segnet.lcw"


def save_segnet(net: SegNet, directory: str | os.PathLike) -> None:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    (path / CONFIG_FILE).write_text(net.config.to_text())
    checkpoint.save(path / WEIGHTS_FILE, net.state_dict())


def load_segnet(directory: str | os.PathLike) -> SegNet:
    path = Path(directory)
    net = SegNet(SegNetConfig.from_text((path / CONFIG_FILE).read_text()))
    net.load_state_dict(checkpoint.load(path / WEIGHTS_FILE))
    return net
