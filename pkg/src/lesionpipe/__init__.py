"""Skin lesion classification pipeline.

Preprocessing (enhancement, grayscale, smoothing, Otsu segmentation,
shape-preserving resize), high-intensity feature extraction, a from-scratch
convolutional classifier, and a stratified cross-validation harness.
"""

__version__ = "0.1.0"

from .errors import LesionPipeError

__all__ = ["LesionPipeError", "__version__"]
