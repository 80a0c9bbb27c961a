import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pnerv.codec import (compress, decode_bitstream, decompress, dequantize_model, dequantize_u8, encode_bitstream,
                         quantize_model, quantize_u8, rate_distortion)
from pnerv.errors import FormatError
from pnerv.metrics import bpp
from pnerv.model import PNeRVConfig, build_model, count_params, embed_all
from pnerv.trainer import TrainConfig, reconstruct, train
from pnerv.video import constant_clip, moving_gradient_clip

SMALL = dict(embed_content_shape=(4, 1, 2), embed_temporal_shape=(2, 4, 8), mainstream_strides=(2, 2, 2, 1, 1, 1),
             channel_widths=(4, 4, 4, 4, 4, 4), encoder_width=4)


@pytest.fixture(scope="module")
def trained():
    clip = moving_gradient_clip(frames=2, height=8, width=16, seed=0)
    model = build_model(PNeRVConfig(**SMALL))
    train(model, clip.frames, TrainConfig(epochs=30, lr_max=5e-3))
    return model, clip


def test_constant_tensor_exact():
    q = quantize_u8(np.full((2, 3), -0.7))
    np.testing.assert_array_equal(dequantize_u8(q), -0.7)


def test_endpoints_exact():
    q = quantize_u8(np.array([0.0, 1.0, 1.0, 0.0]))
    np.testing.assert_array_equal(q.codes, [0, 255, 255, 0])
    np.testing.assert_array_equal(dequantize_u8(q), [0.0, 1.0, 1.0, 0.0])


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=6),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_half_step_bound(v):
    q = quantize_u8(v)
    err = np.abs(dequantize_u8(q) - v).max(initial=0.0)
    assert err <= (v.max(initial=0) - v.min(initial=0)) / 510 + 1e-12 * (1 + np.abs(v).max(initial=0))


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10, allow_nan=False)))
def test_requantization_idempotent(v):
    q = quantize_u8(v)
    q2 = quantize_u8(dequantize_u8(q))
    assert (q2.lo, q2.hi) == (q.lo, q.hi)
    np.testing.assert_array_equal(q2.codes, q.codes)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        quantize_u8(np.array([0.0, np.nan]))


def test_compress_idempotent_bytes(tmp_path, trained):
    model, clip = trained
    compress(model, embed_all(model, clip.frames), tmp_path / "a.bin", {"k": 1})
    m2, e2, meta = decompress(tmp_path / "a.bin")
    assert meta == {"k": 1}
    compress(m2, e2, tmp_path / "b.bin", meta)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_rate_accounting(tmp_path, trained):
    model, clip = trained
    emb = embed_all(model, clip.frames)
    rate = compress(model, emb, tmp_path / "a.bin")
    counts = count_params(model, emb)
    assert rate.payload_bits == 8 * (counts.decoder + counts.embeddings)
    assert rate.total_bits == 8 * (tmp_path / "a.bin").stat().st_size
    assert rate.header_bits == rate.total_bits - rate.payload_bits > 0
    assert rate.bpp == bpp(rate.total_bits, 0, 2, 8, 16)


def test_decompressed_equals_in_memory_dequantization(tmp_path, trained):
    model, clip = trained
    emb = embed_all(model, clip.frames)
    compress(model, emb, tmp_path / "a.bin")
    from_file, _, _ = decompress(tmp_path / "a.bin")
    in_memory = dequantize_model(quantize_model(model, emb))
    np.testing.assert_array_equal(reconstruct(from_file), reconstruct(in_memory))


def test_bitstream_round_trip_and_corruption(trained):
    model, clip = trained
    blob = quantize_model(model, embed_all(model, clip.frames))
    data = encode_bitstream(blob)
    back = decode_bitstream(data)
    assert back.frames == 2 and list(back.decoder) == list(blob.decoder)
    for bad in (b"NOPE" + data[4:], data[:4] + b"\x07\x00" + data[6:], data[:-1], data + b"\x01"):
        with pytest.raises(FormatError):
            decode_bitstream(bad)


def test_rate_distortion_consistency(trained):
    model, clip = trained
    rd = rate_distortion(model, clip.frames)
    assert rd.bpp == bpp(rd.rate.total_bits, 0, 2, 8, 16)
    assert rd.ms_ssim is None  # 8x16 frames are below the SSIM window
    assert rd.psnr <= rd.psnr_unquantized + 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_quantization_does_not_improve_fit(seed):
    clip = moving_gradient_clip(frames=2, height=8, width=16, seed=seed)
    model = build_model(PNeRVConfig(**SMALL, seed=seed))
    train(model, clip.frames, TrainConfig(epochs=30, lr_max=5e-3))
    rd = rate_distortion(model, clip.frames)
    assert rd.psnr_unquantized >= rd.psnr


def test_perfectly_fit_constant_clip_survives():
    clip = constant_clip(frames=2, height=8, width=16, value=0.5)
    model = build_model(PNeRVConfig(**SMALL))
    model.params["dec.head.weight"][:] = 0.0
    model.params["dec.head.bias"][:] = 0.5
    rd = rate_distortion(model, clip.frames)
    assert rd.psnr_unquantized == 99.0 and rd.psnr == 99.0
