"""Otsu thresholding, binary morphology, and lesion extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateImage, ShapeMismatch
from .imgcore import RasterImage

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(eq=False)
class BinaryMask:
    """Foreground mask: uint8 grid of {0, 1}, shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got shape {arr.shape}")
        arr = arr.astype(np.uint8)
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def foreground_count(self) -> int:
        return int(self.data.sum())


@dataclass(eq=False)
class SegmentOutput:
    """Final segmentation: mask, masked lesion image, and the Otsu cut used."""

    mask: BinaryMask
    lesion: RasterImage
    otsu_threshold: int

    def __post_init__(self):
        if self.lesion.pixels.shape != self.mask.data.shape:
            raise ShapeMismatch("lesion and mask shapes differ")
        if np.any(self.lesion.pixels[self.mask.data == 0] != 0):
            raise ValueError("lesion pixels outside the mask must be zero")


def image_histogram(img: RasterImage) -> np.ndarray:
    """256-bin histogram of the rounded, clipped pixel values."""
    if img.channels != 1:
        raise ShapeMismatch("histogram expects a 1-channel image")
    vals = np.clip(np.rint(img.pixels), 0, 255).astype(np.intp)
    return np.bincount(vals.ravel(), minlength=256).astype(np.int64)


def otsu_from_histogram(hist: np.ndarray) -> int:
    """Threshold maximizing between-class variance; ties resolve to the smallest t.

    Classes split as (bin <= t, bin > t) over all 256 candidate cuts.
    """
    h = np.asarray(hist, dtype=np.float64)
    if h.shape != (256,):
        raise ShapeMismatch("histogram must have 256 bins")
    if (h < 0).any():
        raise ValueError("histogram counts must be non-negative")
    if np.count_nonzero(h) < 2:
        raise DegenerateImage("histogram has fewer than two occupied gray levels")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(h)
    w1 = w0[-1] - w0
    m0 = np.cumsum(h * levels)
    m_total = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=valid)
    mu1 = np.divide(m_total - m0, w1, out=np.zeros_like(m0), where=valid)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, 0.0)
    return int(np.argmax(between))  # argmax returns the first (smallest) maximizer


def otsu_threshold(img: RasterImage) -> int:
    """Otsu cut for a 1-channel image, computed on its 256-bin histogram."""
    return otsu_from_histogram(image_histogram(img))


def binarize(img: RasterImage, threshold: float, invert: bool = False) -> BinaryMask:
    """Foreground = pixels <= threshold (the darker side); `invert` flips the rule."""
    if img.channels != 1:
        raise ShapeMismatch("binarize expects a 1-channel image")
    fg = img.pixels > threshold if invert else img.pixels <= threshold
    return BinaryMask(fg.astype(np.uint8))


def disk(radius: int) -> np.ndarray:
    """Boolean disk footprint: offsets with dx^2 + dy^2 <= radius^2."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def binary_opening(mask: BinaryMask, radius: int = 3) -> BinaryMask:
    """Erosion then dilation with a disk footprint.

    Pixels outside the frame count as foreground during erosion and background
    during dilation, so the image border itself never eats into the mask.
    """
    se = disk(radius)
    m = mask.data.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=se, border_value=1)
    opened = ndimage.binary_dilation(eroded, structure=se, border_value=0)
    return BinaryMask(opened.astype(np.uint8))


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep only the largest 8-connected foreground component (first on ties)."""
    m = mask.data.astype(bool)
    if not m.any():
        return BinaryMask(np.zeros_like(mask.data))
    labels, count = ndimage.label(m, structure=_EIGHT_CONNECTED)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    return BinaryMask((labels == keep).astype(np.uint8))


def apply_mask(img: RasterImage, mask: BinaryMask) -> RasterImage:
    """Elementwise product of image and mask: background zeroed, foreground bit-exact."""
    if img.channels != 1:
        raise ShapeMismatch("apply_mask expects a 1-channel image")
    if img.pixels.shape != mask.data.shape:
        raise ShapeMismatch(
            f"image {img.pixels.shape} and mask {mask.data.shape} shapes differ")
    return RasterImage(img.pixels * mask.data)
