"""Raster type, decode, enhancement, grayscale, smoothing, and resize tests."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lesionpipe.errors import (ChannelError, DecodeError, SizeError,
                               UnsupportedFormat)
from lesionpipe.imgcore import (GRAY_WEIGHTS, PipelineConfig, RasterImage,
                                adjust_brightness, adjust_contrast,
                                adjust_sharpness, decode_image, downscale_fit,
                                encode_png, gaussian_filter, gaussian_kernel,
                                pad_center_resize, rgb_to_gray)


def _png_bytes(arr, mode):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, "PNG")
    return buf.getvalue()


class TestRasterImage:
    def test_accepts_gray_and_rgb(self):
        assert RasterImage(np.zeros((4, 5))).channels == 1
        assert RasterImage(np.zeros((4, 5, 3))).channels == 3

    def test_squeezes_single_channel_axis(self):
        img = RasterImage(np.zeros((4, 5, 1)))
        assert img.pixels.shape == (4, 5)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ChannelError):
            RasterImage(np.zeros((4, 5, 2)))
        with pytest.raises(ChannelError):
            RasterImage(np.zeros(7))
        with pytest.raises(ChannelError):
            RasterImage(np.zeros((0, 5)))

    def test_rejects_non_finite(self):
        bad = np.zeros((3, 3))
        bad[1, 1] = np.nan
        with pytest.raises(ValueError):
            RasterImage(bad)

    def test_always_float32(self):
        img = RasterImage(np.arange(6, dtype=np.int64).reshape(2, 3))
        assert img.pixels.dtype == np.float32
        assert img.height == 2 and img.width == 3


class TestDecode:
    def test_white_jpeg_pixel(self):
        buf = io.BytesIO()
        Image.new("RGB", (1, 1), (255, 255, 255)).save(buf, "JPEG", quality=95)
        img = decode_image(buf.getvalue())
        assert img.channels == 3
        assert img.pixels.tolist() == [[[255.0, 255.0, 255.0]]]

    def test_gray_png_stays_single_channel(self):
        data = _png_bytes(np.zeros((2, 2), dtype=np.uint8), "L")
        img = decode_image(data)
        assert img.channels == 1
        assert np.array_equal(img.pixels, np.zeros((2, 2), dtype=np.float32))

    def test_palette_png_converts_to_rgb(self):
        pil = Image.new("P", (2, 2))
        buf = io.BytesIO()
        pil.save(buf, "PNG")
        assert decode_image(buf.getvalue()).channels == 3

    def test_other_format_rejected(self):
        buf = io.BytesIO()
        Image.new("RGB", (2, 2)).save(buf, "BMP")
        with pytest.raises(UnsupportedFormat):
            decode_image(buf.getvalue())

    def test_sixteen_bit_png_rejected(self):
        arr = np.zeros((2, 2), dtype=np.uint16)
        pil = Image.fromarray(arr)
        buf = io.BytesIO()
        pil.save(buf, "PNG")
        with pytest.raises(UnsupportedFormat):
            decode_image(buf.getvalue())

    def test_garbage_rejected(self):
        with pytest.raises(DecodeError):
            decode_image(b"definitely not an image")

    def test_truncated_stream_rejected(self):
        data = _png_bytes(np.full((32, 32), 200, dtype=np.uint8), "L")
        with pytest.raises(DecodeError):
            decode_image(data[: len(data) // 2])

    def test_encode_png_roundtrip(self):
        img = RasterImage(np.arange(12, dtype=np.float32).reshape(3, 4))
        back = decode_image(encode_png(img))
        assert np.array_equal(back.pixels, np.rint(img.pixels))


class TestEnhancement:
    def test_brightness_scales_and_clamps(self):
        img = RasterImage(np.array([[100.0, 200.0, 250.0]]))
        out = adjust_brightness(img, 1.2)
        assert out.pixels.tolist() == [[120.0, 240.0, 255.0]]

    def test_brightness_factor_one_bit_exact(self):
        img = RasterImage(np.linspace(0, 255, 64, dtype=np.float32).reshape(8, 8))
        assert np.array_equal(adjust_brightness(img, 1.0).pixels, img.pixels)

    def test_brightness_zero_gives_black(self):
        img = RasterImage(np.full((2, 2), 180.0))
        assert not adjust_brightness(img, 0.0).pixels.any()

    def test_contrast_pivots_on_mean(self):
        img = RasterImage(np.array([[100.0, 200.0]]))
        out = adjust_contrast(img, 1.2)
        assert out.pixels.tolist() == [[90.0, 210.0]]

    def test_contrast_factor_one_bit_exact(self):
        rng = np.random.default_rng(0)
        img = RasterImage(rng.uniform(0, 255, (9, 7, 3)).astype(np.float32))
        assert np.array_equal(adjust_contrast(img, 1.0).pixels, img.pixels)

    def test_contrast_zero_flattens_to_mean(self):
        img = RasterImage(np.array([[0.0, 100.0, 200.0]]))
        out = adjust_contrast(img, 0.0)
        assert np.allclose(out.pixels, 100.0)

    def test_contrast_rgb_uses_luminance_pivot(self):
        px = np.zeros((1, 2, 3))
        px[0, 0] = (255, 0, 0)
        px[0, 1] = (0, 0, 0)
        mu = 0.2125 * 255 / 2
        out = adjust_contrast(RasterImage(px), 2.0)
        expected_red = min(255.0, mu + 2.0 * (255 - mu))
        assert out.pixels[0, 0, 0] == pytest.approx(expected_red, abs=1e-4)
        assert out.pixels[0, 1, 1] == pytest.approx(max(0.0, mu - 2.0 * mu), abs=1e-4)

    def test_sharpness_factor_one_bit_exact(self):
        rng = np.random.default_rng(1)
        img = RasterImage(rng.uniform(0, 255, (8, 8)).astype(np.float32))
        assert np.array_equal(adjust_sharpness(img, 1.0).pixels, img.pixels)

    def test_sharpness_constant_unchanged_any_factor(self):
        img = RasterImage(np.full((6, 6), 77.0))
        for factor in (0.0, 1.0, 1.3, 3.0):
            assert np.array_equal(adjust_sharpness(img, factor).pixels, img.pixels)

    def test_sharpness_center_blend(self):
        # 3x3 with a single bright center: smoothed center = 5*130/13 = 50,
        # blended = 50 + 1.3 * (130 - 50) = 154; the border is copied as-is.
        px = np.zeros((3, 3))
        px[1, 1] = 130.0
        out = adjust_sharpness(RasterImage(px), 1.3)
        assert out.pixels[1, 1] == pytest.approx(154.0, abs=1e-4)
        border = out.pixels.copy()
        border[1, 1] = 0
        assert not border.any()

    def test_negative_factors_rejected(self):
        img = RasterImage(np.zeros((2, 2)))
        for fn in (adjust_brightness, adjust_contrast, adjust_sharpness):
            with pytest.raises(ValueError):
                fn(img, -0.5)


class TestGrayscale:
    def test_pure_red(self):
        px = np.zeros((1, 1, 3))
        px[0, 0, 0] = 255.0
        out = rgb_to_gray(RasterImage(px))
        assert out.channels == 1
        assert out.pixels[0, 0] == pytest.approx(54.1875, abs=1e-4)

    def test_weights(self):
        assert GRAY_WEIGHTS == (0.2125, 0.7154, 0.0721)

    def test_gray_input_rejected(self):
        with pytest.raises(ChannelError):
            rgb_to_gray(RasterImage(np.zeros((2, 2))))

    def test_white_maps_to_weight_sum(self):
        px = np.full((1, 1, 3), 255.0)
        out = rgb_to_gray(RasterImage(px))
        assert out.pixels[0, 0] == pytest.approx(255.0 * sum(GRAY_WEIGHTS), abs=1e-3)


class TestGaussian:
    def test_kernel_width_for_default_sigma(self):
        assert gaussian_kernel(1.35).shape == (13,)  # radius ceil(4 * 1.35) = 6

    def test_kernel_normalized_and_symmetric(self):
        k = gaussian_kernel(2.0)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(k, k[::-1])

    def test_impulse_response_sums_to_one(self):
        px = np.zeros((31, 31), dtype=np.float32)
        px[15, 15] = 1.0
        out = gaussian_filter(RasterImage(px), 1.35)
        assert out.pixels.sum() == pytest.approx(1.0, abs=1e-5)

    def test_constant_image_unchanged(self):
        img = RasterImage(np.full((16, 16), 123.0))
        out = gaussian_filter(img, 1.35)
        assert np.max(np.abs(out.pixels - 123.0)) <= 1e-4

    def test_global_mean_preserved(self):
        rng = np.random.default_rng(5)
        img = RasterImage(rng.uniform(0, 255, (48, 48)).astype(np.float32))
        out = gaussian_filter(img, 1.35)
        rel = abs(float(out.pixels.mean()) - float(img.pixels.mean()))
        rel /= float(img.pixels.mean())
        assert rel < 1e-3

    def test_smooths_noise(self):
        rng = np.random.default_rng(6)
        img = RasterImage(rng.uniform(0, 255, (32, 32)).astype(np.float32))
        out = gaussian_filter(img, 1.35)
        assert out.pixels.std() < img.pixels.std()

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            gaussian_kernel(0.0)

    def test_color_input_rejected(self):
        with pytest.raises(ChannelError):
            gaussian_filter(RasterImage(np.zeros((4, 4, 3))), 1.0)


class TestPadCenterResize:
    def test_two_by_two_into_six(self):
        img = RasterImage(np.ones((2, 2)))
        out = pad_center_resize(img, 6, 6)
        expected = np.zeros((6, 6), dtype=np.float32)
        expected[2:4, 2:4] = 1.0
        assert np.array_equal(out.pixels, expected)

    def test_asymmetric_offsets(self):
        img = RasterImage(np.full((3, 5), 9.0))
        out = pad_center_resize(img, 7, 7)
        assert out.pixels[2:5, 1:6].min() == 9.0
        assert out.pixels.sum() == 9.0 * 15

    def test_values_bit_exact(self):
        rng = np.random.default_rng(2)
        px = rng.uniform(0, 255, (5, 4)).astype(np.float32)
        out = pad_center_resize(RasterImage(px), 9, 9)
        assert np.array_equal(out.pixels[2:7, 2:6], px)

    def test_oversize_rejected(self):
        with pytest.raises(SizeError):
            pad_center_resize(RasterImage(np.zeros((10, 4))), 8, 8)

    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(1, 16), w=st.integers(1, 16),
           rows=st.integers(16, 24), cols=st.integers(16, 24),
           seed=st.integers(0, 10_000))
    def test_block_placement_property(self, h, w, rows, cols, seed):
        rng = np.random.default_rng(seed)
        px = rng.uniform(1.0, 255.0, (h, w)).astype(np.float32)
        out = pad_center_resize(RasterImage(px), rows, cols).pixels
        hr, hc = (rows - h) // 2, (cols - w) // 2
        assert np.array_equal(out[hr:hr + h, hc:hc + w], px)
        total = out.copy()
        total[hr:hr + h, hc:hc + w] = 0
        assert not total.any()


class TestDownscaleFit:
    def test_square_halves(self):
        img = RasterImage(np.zeros((512, 512)))
        out = downscale_fit(img, 256)
        assert (out.height, out.width) == (256, 256)

    def test_aspect_preserved(self):
        img = RasterImage(np.zeros((300, 600)))
        out = downscale_fit(img, 256)
        assert (out.height, out.width) == (128, 256)

    def test_small_input_passthrough(self):
        img = RasterImage(np.ones((100, 120)))
        assert downscale_fit(img, 256) is img

    def test_idempotent(self):
        img = RasterImage(np.random.default_rng(0).uniform(0, 255, (400, 300)))
        once = downscale_fit(img, 256)
        again = downscale_fit(once, 256)
        assert again is once

    def test_constant_stays_constant(self):
        img = RasterImage(np.full((500, 400), 42.0))
        out = downscale_fit(img, 128)
        assert np.allclose(out.pixels, 42.0, atol=1e-4)

    def test_bad_max_dim(self):
        with pytest.raises(ValueError):
            downscale_fit(RasterImage(np.zeros((4, 4))), 0)


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert (cfg.canvas_rows, cfg.canvas_cols) == (256, 256)
        assert cfg.gaussian_sigma == 1.35
        assert (cfg.brightness_factor, cfg.contrast_factor,
                cfg.sharpness_factor) == (1.2, 1.2, 1.3)

    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(gaussian_sigma=0)
        with pytest.raises(ValueError):
            PipelineConfig(canvas_rows=0)
        with pytest.raises(ValueError):
            PipelineConfig(brightness_factor=-1)
