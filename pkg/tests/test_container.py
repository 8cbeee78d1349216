import struct

import numpy as np
import pytest

from latentseg import container
from latentseg.codec import CodecConfig, build_codec, decompress_forward
from latentseg.container import FIXED_HEADER_BYTES, CompressedBlob, encode_latent, parse, serialize
from latentseg.data import generate_synthetic
from latentseg.errors import (
    BadMagicError,
    CorruptionError,
    IncompatibleError,
    InconsistentError,
    LatentSegError,
    TruncatedError,
    VersionError,
)
from latentseg.huffman import BitPayload
from latentseg.imageio import read_ppm, write_pnm
from latentseg.quantizer import fit_params, float2int, int2float
from latentseg.tensor import Tensor, no_grad


def random_blob(rng, d=1, n=8, hw=(64, 64), c=16):
    s = 4 * 2**d
    z = rng.normal(size=(1, c, hw[0] // s, hw[1] // s)).astype(np.float32)
    return encode_latent(z, n, d, hw), z


def test_fixed_header_layout():
    blob, _ = random_blob(np.random.default_rng(0))
    raw = serialize(blob)
    assert raw[:4] == b"LCR1" and raw[4] == 1
    h, w, c, d, n = struct.unpack_from("<IIBBB", raw, 5)
    assert (h, w, c, d, n) == (64, 64, 16, 1, 8)
    lo, hi, count = struct.unpack_from("<ffI", raw, 16)
    assert (lo, hi, count) == (blob.delta, blob.Delta, 16 * 8 * 8)
    assert FIXED_HEADER_BYTES == 32
    dict_len = 2 + 2 * len(blob.dictionary.alphabet)
    assert len(raw) == FIXED_HEADER_BYTES + dict_len + (blob.payload.nbits + 7) // 8
    assert container.header_size(blob) == FIXED_HEADER_BYTES + dict_len


def test_header_size_large_image():
    rng = np.random.default_rng(1)
    blob, _ = random_blob(rng, d=2, n=8, hw=(1024, 2048))
    raw = serialize(blob)
    assert blob.latent_shape == (16, 64, 128)
    assert len(raw) == 32 + len(blob.dictionary.to_bytes()) + len(blob.payload.data)


@pytest.mark.parametrize("d,n", [(1, 2), (2, 4), (3, 8), (1, 6)])
def test_serialize_parse_roundtrip(d, n):
    blob, z = random_blob(np.random.default_rng(d * 10 + n), d=d, n=n, hw=(64, 96))
    raw = serialize(blob)
    back = parse(raw)
    assert back == blob
    assert serialize(back) == raw
    # decoding reproduces the quantiser exactly, with no network involved
    expected = int2float(float2int(z[0], fit_params(z[0], n))).data
    np.testing.assert_array_equal(container.latent_from_blob(back).data[0], expected)


def test_degenerate_latent_roundtrip():
    z = np.full((1, 16, 8, 8), 0.25, np.float32)
    blob = encode_latent(z, 4, 1, (64, 64))
    back = parse(serialize(blob))
    assert back.dictionary.length_of() == {0: 1}
    np.testing.assert_array_equal(container.latent_from_blob(back).data, z)


def test_compression_factor_values():
    assert container.compression_factor(256, 256, 4096) == 48.0
    assert container.compression_factor(10, 10, 300) == 1.0
    assert CodecConfig(d=2, n=8).raw_cf() == 48.0


def test_parse_error_classes():
    raw = serialize(random_blob(np.random.default_rng(2))[0])
    with pytest.raises(TruncatedError):
        parse(raw[:3])
    with pytest.raises(BadMagicError):
        parse(b"JUNK" + raw[4:])
    with pytest.raises(VersionError):
        parse(raw[:4] + b"\x02" + raw[5:])
    with pytest.raises(TruncatedError):
        parse(raw[:20])
    with pytest.raises(TruncatedError):
        parse(raw[:-1])
    with pytest.raises(InconsistentError):
        parse(raw + b"\x00")
    bad_d = bytearray(raw)
    bad_d[14] = 7
    with pytest.raises(InconsistentError):
        parse(bytes(bad_d))


def test_flipped_payload_byte_is_typed_error_or_valid():
    rng = np.random.default_rng(3)
    blob, _ = random_blob(rng)
    raw = serialize(blob)
    start = len(raw) - len(blob.payload.data)
    caught = 0
    for i in range(start, len(raw)):
        bad = bytearray(raw)
        bad[i] ^= 0xFF
        try:
            container.decode_symbols(parse(bytes(bad)))
        except LatentSegError:
            caught += 1
    assert caught > 0


FIELD_RANGES = {
    "magic": (0, 4), "version": (4, 5), "height": (5, 9), "width": (9, 13), "channels": (13, 14),
    "d": (14, 15), "n": (15, 16), "delta": (16, 20), "Delta": (20, 24), "count": (24, 28),
}
STRUCTURAL = {"magic", "version", "height", "width", "channels", "d", "n", "count"}


def field_ranges(blob):
    ranges = dict(FIELD_RANGES)
    dict_end = 28 + len(blob.dictionary.to_bytes())
    ranges["dictionary"] = (28, dict_end)
    ranges["bitcount"] = (dict_end, dict_end + 4)
    ranges["payload"] = (dict_end + 4, dict_end + 4 + len(blob.payload.data))
    return ranges


def fuzz(raw, blob, mutations, seed):
    """Return per-field (typed errors, clean parses) and raise on anything untyped."""
    rng = np.random.default_rng(seed)
    ranges = field_ranges(blob)
    names = sorted(ranges)
    stats = {k: [0, 0] for k in names}
    for i in range(mutations):
        name = names[i % len(names)]
        lo, hi = ranges[name]
        pos = int(rng.integers(lo, hi))
        bad = bytearray(raw)
        bad[pos] = (bad[pos] + int(rng.integers(1, 256))) % 256
        try:
            parsed = parse(bytes(bad))
            container.latent_from_blob(parsed)
            stats[name][1] += 1
        except LatentSegError:
            stats[name][0] += 1
    return stats


def test_fuzz_structural_fields_always_rejected():
    blob, _ = random_blob(np.random.default_rng(4), n=6)
    raw = serialize(blob)
    stats = fuzz(raw, blob, 1100, seed=5)
    for name in STRUCTURAL:
        typed, clean = stats[name]
        assert clean == 0 and typed > 0, name


def test_compress_pipeline_and_incompatibility(tmp_path):
    scene = generate_synthetic(3, 1)[0]
    write_pnm(tmp_path / "in.ppm", scene.image)
    pair = build_codec(CodecConfig(d=1), seed=0)
    out = container.compress_file(tmp_path / "in.ppm", pair, 8, tmp_path / "a.lcr")
    again = container.compress_file(tmp_path / "in.ppm", pair, 8, tmp_path / "b.lcr")
    assert out.read_bytes() == again.read_bytes()
    container.decompress_file(tmp_path / "a.lcr", pair, tmp_path / "rec.ppm")
    assert read_ppm(tmp_path / "rec.ppm").shape == (64, 64, 3)
    wrong = build_codec(CodecConfig(d=2), seed=0)
    with pytest.raises(IncompatibleError):
        container.decompress_file(tmp_path / "a.lcr", wrong, tmp_path / "never.ppm")
    assert not (tmp_path / "never.ppm").exists()
    (tmp_path / "trunc.lcr").write_bytes(out.read_bytes()[:40])
    with pytest.raises(TruncatedError):
        container.decompress_file(tmp_path / "trunc.lcr", pair, tmp_path / "never.ppm")
    assert not (tmp_path / "never.ppm").exists()


def test_file_decode_equals_in_memory_quantised_pipeline():
    scene = generate_synthetic(11, 1)[0]
    pair = build_codec(CodecConfig(d=1), seed=2)
    blob = parse(serialize(container.compress_image(pair, scene.image, 8)))
    with no_grad():
        from latentseg.codec import compress_forward
        from latentseg.imageio import to_tensor_data, from_tensor_data
        z = compress_forward(pair, Tensor(to_tensor_data(scene.image)))
        ref = decompress_forward(pair, int2float(float2int(z, fit_params(z, 8))))
    np.testing.assert_array_equal(container.decompress_blob(pair, blob), from_tensor_data(ref.data))


def test_blob_validation_on_serialize():
    blob, _ = random_blob(np.random.default_rng(6))
    fields = dict(blob.__dict__)
    fields["symbol_count"] = 5
    with pytest.raises(InconsistentError):
        serialize(CompressedBlob(**fields))
    with pytest.raises(CorruptionError):
        BitPayload(3, b"")
