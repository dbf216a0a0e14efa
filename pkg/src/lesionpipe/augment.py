"""Deterministic training-set augmentation: rotation, zoom, flips, intensity jitter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import RasterImage, adjust_brightness, adjust_contrast
from .seeding import stream_rng


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the random transforms; every copy is fully determined by
    (rng_seed, stream_id)."""

    multiplier: int = 10
    rotation_max: float = 30.0
    zoom_range: tuple[float, float] = (0.8, 1.2)
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    flip_horizontal: bool = True
    flip_vertical: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.multiplier < 0:
            raise ValueError("multiplier must be >= 0")
        if self.rotation_max < 0:
            raise ValueError("rotation_max must be >= 0")
        lo, hi = self.zoom_range
        if not (0 < lo <= hi):
            raise ValueError("zoom_range must satisfy 0 < min <= max")
        for name in ("brightness_jitter", "contrast_jitter"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


def _sample_bilinear(px: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear lookup at float coordinates; anything off the grid reads as 0."""
    h, w = px.shape[:2]
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = rows - r0
    fc = cols - c0
    out = None
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = px[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
        if px.ndim == 3:
            vals = vals * (weight * inside)[..., None]
        else:
            vals = vals * (weight * inside)
        out = vals if out is None else out + vals
    return out


def _affine_about_center(img: RasterImage, matrix: np.ndarray) -> RasterImage:
    """Resample through the inverse of `matrix` applied about the image center."""
    h, w = img.height, img.width
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = rr - cy
    dx = cc - cx
    inv = np.linalg.inv(matrix)
    src_r = inv[0, 0] * dy + inv[0, 1] * dx + cy
    src_c = inv[1, 0] * dy + inv[1, 1] * dx + cx
    return RasterImage(_sample_bilinear(img.pixels.astype(np.float64), src_r, src_c))


def rotate(img: RasterImage, degrees: float) -> RasterImage:
    """Rotate about the center, bilinear, zero fill; 0 degrees is the identity."""
    if degrees == 0.0:
        return RasterImage(img.pixels.copy())
    t = math.radians(degrees)
    m = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return _affine_about_center(img, m)


def zoom(img: RasterImage, factor: float) -> RasterImage:
    """Scale about the center, cropping or zero-padding back to the input size."""
    if factor <= 0:
        raise ValueError("zoom factor must be > 0")
    if factor == 1.0:
        return RasterImage(img.pixels.copy())
    m = np.array([[factor, 0.0], [0.0, factor]])
    return _affine_about_center(img, m)


def augment_sample(img: RasterImage, params: AugmentParams, stream_id: int) -> list[RasterImage]:
    """Produce exactly `params.multiplier` independently transformed copies.

    Per copy, in order: rotation, zoom, flips, brightness jitter, contrast
    jitter. Draws come from a stream derived from (rng_seed, stream_id), so
    the same inputs always reproduce the same bytes.
    """
    rng = stream_rng(params.rng_seed, "augment", stream_id)
    copies: list[RasterImage] = []
    for _ in range(params.multiplier):
        angle = rng.uniform(-params.rotation_max, params.rotation_max)
        factor = rng.uniform(params.zoom_range[0], params.zoom_range[1])
        flip_h = params.flip_horizontal and rng.random() < 0.5
        flip_v = params.flip_vertical and rng.random() < 0.5
        b_jit = rng.uniform(-params.brightness_jitter, params.brightness_jitter)
        c_jit = rng.uniform(-params.contrast_jitter, params.contrast_jitter)

        out = rotate(img, angle)
        out = zoom(out, factor)
        if flip_h:
            out = RasterImage(np.flip(out.pixels, axis=1).copy())
        if flip_v:
            out = RasterImage(np.flip(out.pixels, axis=0).copy())
        if b_jit != 0.0:
            out = adjust_brightness(out, 1.0 + b_jit)
        if c_jit != 0.0:
            out = adjust_contrast(out, 1.0 + c_jit)
        copies.append(out)
    return copies
