import numpy as np
import pytest

from latentseg import functional as F
from latentseg.codec import (
    CodecConfig,
    build_codec,
    compress_forward,
    decompress_forward,
    load_codec,
    reconstruct,
    save_codec,
    straight_through_quantize,
    train_codec,
)
from latentseg.compute import conv_macs, count_macs, count_params, pipeline_report, write_report_csv, REPORT_COLUMNS
from latentseg.data import NUM_CLASSES, generate_synthetic
from latentseg.errors import ConfigError, ShapeError, ValidationError
from latentseg.imageio import to_tensor_data
from latentseg.metrics import dice, psnr
from latentseg.nn import Conv2d, Module
from latentseg.segmentation import (
    DualGraphHead,
    ResidualBlock,
    SegNetConfig,
    build_resnet_sm,
    build_segnet,
    infer,
    load_segnet,
    predict,
    save_segnet,
    segment,
    train_seg,
)
from latentseg.tensor import Tensor, no_grad

from conftest import module_gradcheck


def images(count=4, seed=0, size=64):
    return np.stack([to_tensor_data(s.image)[0] for s in generate_synthetic(seed, count, size)])


# ---- codec ----------------------------------------------------------------

@pytest.mark.parametrize("d,hw,latent", [(1, 64, 8), (2, 64, 4), (3, 64, 2), (2, 96, 6)])
def test_latent_shape_law(d, hw, latent):
    pair = build_codec(CodecConfig(d=d), seed=0)
    with no_grad():
        z = compress_forward(pair, Tensor(np.zeros((1, 3, hw, hw))))
        out = decompress_forward(pair, z)
    assert z.shape == (1, 16, latent, latent) and np.isfinite(z.data).all()
    assert out.shape == (1, 3, hw, hw)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_codec_config_validation_and_text():
    with pytest.raises(ConfigError):
        CodecConfig(d=4)
    with pytest.raises(ConfigError):
        CodecConfig(stem_stride=3)
    with pytest.raises(ShapeError):
        CodecConfig(d=2).latent_shape(64, 40)
    cfg = CodecConfig(d=3, n=4)
    assert CodecConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        CodecConfig.from_text("bogus=1\n")


def test_raw_budget_below_raw_image():
    for d in (1, 2, 3):
        for n in range(2, 9):
            cfg = CodecConfig(d=d, n=n)
            c, h, w = cfg.latent_shape(64, 64)
            assert c * h * w * n < 24 * 64 * 64
            assert cfg.raw_cf() == pytest.approx(24 * 64 * 64 / (c * h * w * n))
    assert CodecConfig(d=2, n=8).raw_cf() == 48.0


def test_codec_determinism_and_shape_errors():
    a, b = build_codec(CodecConfig(d=2), seed=4), build_codec(CodecConfig(d=2), seed=4)
    for (ka, va), (kb, vb) in zip(a.compressor.state_dict().items(), b.compressor.state_dict().items()):
        assert ka == kb and np.array_equal(va, vb)
    x = Tensor(images(1))
    with no_grad():
        assert np.array_equal(compress_forward(a, x).data, compress_forward(b, x).data)
        with pytest.raises(ShapeError):
            compress_forward(a, Tensor(np.zeros((1, 3, 64, 40))))
        with pytest.raises(ShapeError):
            decompress_forward(a, Tensor(np.zeros((1, 8, 4, 4))))


def test_codec_gradcheck_small():
    cfg = CodecConfig(d=1, latent_channels=2, hidden_channels=3)
    pair = build_codec(cfg, seed=1)
    rng = np.random.default_rng(0)
    x = rng.random((1, 3, 8, 8))

    class Both(Module):
        def __init__(self):
            self.c, self.d = pair.compressor, pair.decompressor

        def forward(self, t):
            return self.d(self.c(t))

    assert module_gradcheck(Both(), x, loss=lambda out: F.mse_loss(out, Tensor(x)), max_entries=20) < 1e-3


def test_zero_images_learn_constant():
    pair = build_codec(CodecConfig(d=1), seed=0)
    hist = train_codec(pair, np.zeros((2, 3, 32, 32), np.float32), epochs=30, lr=3e-2)
    assert hist[-1] < 1e-4


def test_training_improves_and_is_deterministic(tmp_path):
    x = images(4)
    runs = []
    for _ in range(2):
        pair = build_codec(CodecConfig(d=1), seed=3)
        before = reconstruct(pair, x)
        runs.append(train_codec(pair, x, epochs=6, seed=5))
    assert runs[0] == runs[1]
    assert runs[0][-1] < runs[0][0]
    after = reconstruct(pair, x, n=8)
    assert psnr(after, x, 1.0) > psnr(before, x, 1.0)
    save_codec(pair, tmp_path / "c")
    half = load_codec(tmp_path / "c", decompressor=False)
    assert half.decompressor is None
    with no_grad():
        z1 = compress_forward(half, Tensor(x[:1]))
        z2 = compress_forward(pair, Tensor(x[:1]))
    np.testing.assert_array_equal(z1.data, z2.data)


def test_straight_through_quantisation():
    z = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3, 3)), requires_grad=True)
    q = straight_through_quantize(z, 4)
    assert len(np.unique(q.data[0])) <= 16
    F.sum(q).backward()
    np.testing.assert_array_equal(z.grad, 1.0)
    pair = build_codec(CodecConfig(d=1, n=4), seed=0)
    shapes = [p.shape for p in pair.compressor.parameters()]
    train_codec(pair, images(2), epochs=1, quantize_in_loop=True)
    assert [p.shape for p in pair.compressor.parameters()] == shapes


def test_training_rejects_empty():
    with pytest.raises(ValidationError):
        train_codec(build_codec(CodecConfig()), np.zeros((0, 3, 64, 64)))


# ---- segmentation ---------------------------------------------------------

def test_backbone_shape_and_residual_identity():
    cfg = SegNetConfig()
    net = build_resnet_sm(cfg)
    with no_grad():
        assert net(Tensor(np.zeros((1, 16, 4, 4)))).shape == (1, 32, 4, 4)
        with pytest.raises(ShapeError):
            net(Tensor(np.zeros((1, 3, 4, 4))))
    rng = np.random.default_rng(0)
    block = ResidualBlock(4, 6, rng)
    for conv in (block.conv1, block.conv2):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    x = Tensor(rng.normal(size=(1, 4, 5, 5)))
    with no_grad():
        np.testing.assert_array_equal(block(x).data, block.proj(x).data)
    same = ResidualBlock(4, 4, rng)
    same.conv2.weight.data[:] = 0
    with no_grad():
        np.testing.assert_array_equal(same(x).data, x.data)


@pytest.mark.parametrize("cin,cout,hw", [(3, 3, 4), (2, 4, 5), (4, 4, 3)])
def test_residual_block_gradcheck(cin, cout, hw):
    rng = np.random.default_rng(cin + cout + hw)
    block = ResidualBlock(cin, cout, rng)
    for p in block.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape).astype(np.float32)
    assert module_gradcheck(block, rng.normal(size=(2, cin, hw, hw))) < 1e-3


def test_two_block_backbone_gradcheck():
    rng = np.random.default_rng(1)
    net = build_resnet_sm(SegNetConfig(latent_channels=3, width=4), seed=2)
    assert module_gradcheck(net, rng.normal(size=(1, 3, 4, 4))) < 1e-3


def _randomised_head(channels, knodes, seed):
    rng = np.random.default_rng(seed)
    head = DualGraphHead(channels, knodes, rng)
    for conv in (head.coord_out, head.feat_out):
        conv.weight.data = rng.normal(0, 0.5, conv.weight.shape).astype(np.float32)
    return head, rng


def test_head_identity_at_init_and_assignment():
    rng = np.random.default_rng(0)
    head = DualGraphHead(8, 5, rng)
    x = Tensor(rng.normal(size=(2, 8, 6, 6)))
    with no_grad():
        np.testing.assert_array_equal(head(x).data, x.data)
        a = head.assignment(x).data
    assert a.shape == (2, 5, 6, 6)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, rtol=1e-6)
    with pytest.raises(ConfigError):
        DualGraphHead(8, 0)


@pytest.mark.parametrize("channels,knodes,hw", [(4, 3, 8), (6, 4, 6), (4, 2, 5)])
def test_coordinate_branch_gradcheck(channels, knodes, hw):
    head, rng = _randomised_head(channels, knodes, hw)
    wrapped = _Branch(head, "coordinate_branch")
    assert module_gradcheck(wrapped, rng.normal(size=(1, channels, hw, hw))) < 1e-3


@pytest.mark.parametrize("channels,knodes,hw", [(4, 3, 8), (6, 4, 6), (4, 2, 5)])
def test_feature_branch_gradcheck(channels, knodes, hw):
    head, rng = _randomised_head(channels, knodes, hw + 100)
    wrapped = _Branch(head, "feature_branch")
    assert module_gradcheck(wrapped, rng.normal(size=(2, channels, hw, hw))) < 1e-3


def test_full_head_gradcheck_8x8():
    head, rng = _randomised_head(4, 4, 7)
    assert module_gradcheck(head, rng.normal(size=(1, 4, 8, 8))) < 1e-3


class _Branch(Module):
    def __init__(self, head, name):
        self.head = head
        self.name = name

    def forward(self, x):
        return getattr(self.head, self.name)(x)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_logits_at_original_resolution(d):
    cfg = SegNetConfig.for_codec(CodecConfig(d=d), "latent")
    net = build_segnet(cfg, seed=0)
    assert net.encoder is None
    s = 4 * 2**d
    with no_grad():
        out = segment(net, Tensor(np.zeros((1, 16, 64 // s, 64 // s))))
        assert out.shape == (1, 4, 64, 64)
        with pytest.raises(ShapeError):
            segment(net, Tensor(np.zeros((1, 3, 64, 64))))
    img_net = build_segnet(SegNetConfig.for_codec(CodecConfig(d=d), "image"), seed=0)
    with no_grad():
        assert segment(img_net, Tensor(np.zeros((1, 3, 64, 64)))).shape == (1, 4, 64, 64)


def test_predict_argmax_and_ties():
    logits = np.zeros((1, 4, 2, 2))
    logits[:, 2] = 1.0
    assert (predict(logits) == 2).all()
    tie = np.zeros((1, 4, 1, 1))
    tie[0, 1] = tie[0, 3] = 5.0
    assert predict(tie)[0, 0, 0] == 1


def test_segnet_config_text_and_errors(tmp_path):
    cfg = SegNetConfig(mode="image", d=2, head="plain_conv")
    assert SegNetConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        SegNetConfig(mode="pixels")
    with pytest.raises(ConfigError):
        SegNetConfig(knodes=0)
    net = build_segnet(cfg, seed=3)
    save_segnet(net, tmp_path / "s")
    back = load_segnet(tmp_path / "s")
    for (ka, va), (kb, vb) in zip(net.state_dict().items(), back.state_dict().items()):
        assert ka == kb and np.array_equal(va, vb)


def _latents(count, seed):
    scenes = generate_synthetic(seed, count)
    pair = build_codec(CodecConfig(d=1), seed=0)
    from latentseg.experiments import quantized_latents
    x = np.stack([to_tensor_data(s.image)[0] for s in scenes])
    return quantized_latents(pair, x, 8), np.stack([s.mask for s in scenes])


def test_single_image_memorisation():
    z, m = _latents(1, 21)
    net = build_segnet(SegNetConfig.for_codec(CodecConfig(d=1), "latent"), seed=0)
    train_seg(net, z, m, iterations=300, batch_size=1, lr=3e-3, log_every=0)
    assert dice(infer(net, z), m, NUM_CLASSES).macro >= 0.95


def test_seg_training_deterministic_and_validated():
    z, m = _latents(3, 2)
    curves = []
    for _ in range(2):
        net = build_segnet(SegNetConfig.for_codec(CodecConfig(d=1), "latent"), seed=1)
        curves.append(train_seg(net, z, m, iterations=5, batch_size=2, seed=9, log_every=0))
    assert curves[0] == curves[1]
    with pytest.raises(ValidationError):
        train_seg(net, z, np.full_like(m, 7), iterations=1)
    with pytest.raises(ValidationError):
        train_seg(net, z[:0], m[:0], iterations=1)
    with pytest.raises(ConfigError):
        train_seg(net, z, m, iterations=1, optimizer="rmsprop")


# ---- compute accounting ---------------------------------------------------

class OneConv(Module):
    def __init__(self):
        self.conv = Conv2d(3, 16, 3, bias=False)

    def forward(self, x):
        return self.conv(x)


class Empty(Module):
    def forward(self, x):
        return x


def test_single_conv_counts():
    net = OneConv()
    assert count_params(net) == 432
    assert count_macs(net, (1, 3, 64, 64)) == 1_769_472
    assert conv_macs(3, 16, 3, 64, 64) == 1_769_472
    assert count_params(Empty()) == 0 and count_macs(Empty(), (1, 3, 8, 8)) == 0
    assert count_params(None) == 0 and count_macs(None, (1,)) == 0


def test_count_additivity():
    pair = build_codec(CodecConfig(d=2), seed=0)
    comp = pair.compressor
    layers = [comp.stem] + comp.digests + [comp.head]
    assert sum(count_params(l) for l in layers) == count_params(comp)
    shapes = [(1, 3, 64, 64), (1, 32, 16, 16), (1, 32, 8, 8), (1, 32, 4, 4)]
    assert sum(count_macs(l, s) for l, s in zip(layers, shapes)) == count_macs(comp, (1, 3, 64, 64))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_proposed_cloud_cheaper(d, tmp_path):
    codec = build_codec(CodecConfig(d=d), seed=0)
    lat = build_segnet(SegNetConfig.for_codec(codec.config, "latent"))
    img = build_segnet(SegNetConfig.for_codec(codec.config, "image"))
    rep = pipeline_report(codec, lat, img, (64, 64))
    assert rep.cloud_macs("proposed") < rep.cloud_macs("BL3")
    assert rep.saving_pct("BL3", "cloud") > 0 and rep.saving_pct("BL3", "total") > 0
    assert rep.edge_macs("proposed") == count_macs(codec.compressor, (1, 3, 64, 64))
    write_report_csv(tmp_path / "c.csv", rep)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 5


def test_missing_decompressor_leaves_only_stem_difference():
    codec = build_codec(CodecConfig(d=1), seed=0)
    codec.decompressor = None
    lat = build_segnet(SegNetConfig.for_codec(codec.config, "latent"))
    img = build_segnet(SegNetConfig.for_codec(codec.config, "image"))
    rep = pipeline_report(codec, lat, img, (64, 64))
    assert rep.stages["net_D"].macs == 0
    assert rep.cloud_macs("BL3") - rep.cloud_macs("proposed") == rep.stages["net_seg_E"].macs
