"""Exception types raised across the pipeline."""


class LesionPipeError(Exception):
    """Base class for all pipeline errors."""


class DecodeError(LesionPipeError):
    """Byte stream is not a decodable image."""


class UnsupportedFormat(LesionPipeError):
    """Image format or bit depth outside JPEG/PNG 8-bit."""


class ChannelError(LesionPipeError):
    """Channel count does not match what the operation expects."""


class SizeError(LesionPipeError):
    """Image does not fit the requested canvas."""


class DegenerateImage(LesionPipeError):
    """Image content carries no usable signal (e.g. a single gray level)."""


class ShapeMismatch(LesionPipeError):
    """Array shapes are incompatible for the operation."""


class ShapeError(LesionPipeError):
    """Layer stack does not propagate to a valid output shape."""


class LabelOutOfRange(LesionPipeError):
    """Class label outside the number of classes."""


class EmptyDataset(LesionPipeError):
    """No usable samples found."""


class TooFewSamples(LesionPipeError):
    """Not enough samples per class for the requested fold count."""


class LengthMismatch(LesionPipeError):
    """Parallel sequences differ in length."""


class CorruptStream(LesionPipeError):
    """Serialized weight stream is malformed or truncated."""


class SpecMismatch(LesionPipeError):
    """Weight stream belongs to a different network layout."""


class ConfigError(LesionPipeError):
    """Unknown or invalid configuration key/value."""


class IoError(LesionPipeError):
    """Report or artifact could not be written."""
