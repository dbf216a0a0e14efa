"""Raster types and pixel-level preprocessing: enhancement, grayscale, smoothing, resize."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ChannelError, DecodeError, SizeError, UnsupportedFormat

# Luminance weights used for grayscale conversion and for the contrast pivot.
GRAY_WEIGHTS = (0.2125, 0.7154, 0.0721)

# 3x3 smoothing kernel behind the sharpness blend: center 5, ring of ones, sum 13.
_SMOOTH_KERNEL = np.array(
    [[1.0, 1.0, 1.0],
     [1.0, 5.0, 1.0],
     [1.0, 1.0, 1.0]], dtype=np.float64) / 13.0

_GRAY_PIL_MODES = ("1", "L", "LA")
_UNSUPPORTED_PIL_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N", "F")


@dataclass(eq=False)
class RasterImage:
    """Decoded pixel grid: float32, nominal range [0, 255], shape (H, W) or (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ChannelError(f"expected (H, W) or (H, W, 3) pixel grid, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ChannelError("image must contain at least one pixel")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the per-image preprocessing chain."""

    canvas_rows: int = 256
    canvas_cols: int = 256
    gaussian_sigma: float = 1.35
    brightness_factor: float = 1.2
    contrast_factor: float = 1.2
    sharpness_factor: float = 1.3
    rng_seed: int = 0

    def __post_init__(self):
        if self.canvas_rows < 1 or self.canvas_cols < 1:
            raise ValueError("canvas dimensions must be positive")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be > 0")
        for name in ("brightness_factor", "contrast_factor", "sharpness_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def decode_image(data: bytes) -> RasterImage:
    """Decode a JPEG or PNG byte stream into a float32 raster.

    Grayscale sources keep one channel; everything else lands in RGB.
    """
    try:
        im = Image.open(io.BytesIO(data))
        fmt = im.format
    except UnidentifiedImageError as exc:
        raise DecodeError("not a decodable image stream") from exc
    if fmt not in ("JPEG", "PNG"):
        raise UnsupportedFormat(f"unsupported image format: {fmt}")
    if im.mode in _UNSUPPORTED_PIL_MODES:
        raise UnsupportedFormat(f"unsupported bit depth (mode {im.mode})")
    try:
        converted = im.convert("L") if im.mode in _GRAY_PIL_MODES else im.convert("RGB")
        arr = np.asarray(converted, dtype=np.float32)
    except OSError as exc:  # truncated payloads surface at pixel access
        raise DecodeError("malformed image stream") from exc
    return RasterImage(arr)


def encode_png(img: RasterImage) -> bytes:
    """Encode to PNG, quantizing the float carrier to 8 bits at this boundary only."""
    arr = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    pil = Image.fromarray(arr, mode="L" if img.channels == 1 else "RGB")
    buf = io.BytesIO()
    pil.save(buf, "PNG")
    return buf.getvalue()


def _luminance(px: np.ndarray) -> np.ndarray:
    if px.ndim == 2:
        return px.astype(np.float64)
    w = np.asarray(GRAY_WEIGHTS, dtype=np.float64)
    return px.astype(np.float64) @ w


def adjust_brightness(img: RasterImage, factor: float) -> RasterImage:
    """Scale every pixel by `factor`, clamped to [0, 255]."""
    if factor < 0:
        raise ValueError("brightness factor must be >= 0")
    out = np.clip(img.pixels.astype(np.float64) * factor, 0.0, 255.0)
    return RasterImage(out)


def adjust_contrast(img: RasterImage, factor: float) -> RasterImage:
    """Blend pixels away from the mean luminance: out = mean + factor * (p - mean).

    The pivot is the scalar mean of the luminance-weighted image, so color
    inputs share one pivot across channels. Factor 1.0 is an identity.
    """
    if factor < 0:
        raise ValueError("contrast factor must be >= 0")
    px = img.pixels.astype(np.float64)
    mu = float(_luminance(img.pixels).mean())
    out = np.clip(mu + factor * (px - mu), 0.0, 255.0)
    return RasterImage(out)


def adjust_sharpness(img: RasterImage, factor: float) -> RasterImage:
    """Blend between a 3x3-smoothed copy and the input: out = S + factor * (p - S).

    Border pixels of the smoothed copy are taken from the input unchanged, so
    the blend never alters the one-pixel frame.
    """
    if factor < 0:
        raise ValueError("sharpness factor must be >= 0")
    px = img.pixels.astype(np.float64)
    if px.ndim == 2:
        smooth = ndimage.correlate(px, _SMOOTH_KERNEL, mode="nearest")
    else:
        smooth = np.stack(
            [ndimage.correlate(px[:, :, c], _SMOOTH_KERNEL, mode="nearest") for c in range(3)],
            axis=2)
    smooth[0, :] = px[0, :]
    smooth[-1, :] = px[-1, :]
    smooth[:, 0] = px[:, 0]
    smooth[:, -1] = px[:, -1]
    out = np.clip(smooth + factor * (px - smooth), 0.0, 255.0)
    return RasterImage(out)


def rgb_to_gray(img: RasterImage) -> RasterImage:
    """Weighted luminance grayscale (weights 0.2125 / 0.7154 / 0.0721)."""
    if img.channels != 3:
        raise ChannelError("rgb_to_gray expects a 3-channel image")
    return RasterImage(_luminance(img.pixels))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(4 * sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(img: RasterImage, sigma: float) -> RasterImage:
    """Separable Gaussian smoothing with edge replication at the borders."""
    if img.channels != 1:
        raise ChannelError("gaussian_filter expects a 1-channel image")
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.pixels.astype(np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return RasterImage(out)


def pad_center_resize(img: RasterImage, n_rows: int, n_cols: int) -> RasterImage:
    """Center the image on an all-zero canvas without rescaling.

    Offsets are floor((canvas - size) / 2); pixel values are copied bit-exact.
    """
    h, w = img.height, img.width
    if h > n_rows or w > n_cols:
        raise SizeError(f"image {h}x{w} exceeds canvas {n_rows}x{n_cols}")
    hr = (n_rows - h) // 2
    hc = (n_cols - w) // 2
    shape = (n_rows, n_cols) if img.channels == 1 else (n_rows, n_cols, 3)
    canvas = np.zeros(shape, dtype=np.float32)
    canvas[hr:hr + h, hc:hc + w] = img.pixels
    return RasterImage(canvas)


def _bilinear_resize(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = px.shape[:2]
    rows = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    cols = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    if px.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    p = px.astype(np.float64)
    top = p[r0][:, c0] * (1 - fc) + p[r0][:, c1] * fc
    bot = p[r1][:, c0] * (1 - fc) + p[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def downscale_fit(img: RasterImage, max_dim: int) -> RasterImage:
    """Uniformly shrink so the longest side is `max_dim`; smaller inputs pass through."""
    if max_dim < 1:
        raise ValueError("max_dim must be >= 1")
    h, w = img.height, img.width
    longest = max(h, w)
    if longest <= max_dim:
        return img
    scale = max_dim / longest
    out_h = max(1, int(np.rint(h * scale)))
    out_w = max(1, int(np.rint(w * scale)))
    return RasterImage(_bilinear_resize(img.pixels, out_h, out_w))
