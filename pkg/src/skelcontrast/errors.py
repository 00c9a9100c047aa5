"""Exception types shared across the package."""


class SkelContrastError(Exception):
    """Base class for all package errors."""


class NonFiniteError(SkelContrastError):
    """An operation produced NaN or Inf."""


class ShapeMismatchError(SkelContrastError):
    """Operands have incompatible shapes."""


class BadConfigError(SkelContrastError):
    """A configuration value is out of range or inconsistent."""


class InvalidModalityError(SkelContrastError):
    """Unknown or inapplicable modality tag."""


class FormatError(SkelContrastError):
    """A serialized file violates its format. Carries the byte offset of the
    first violation."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ZeroVectorError(SkelContrastError):
    """A vector with (near-)zero norm where a direction is required."""


class EmptySetError(SkelContrastError):
    """A loss was asked to operate on an empty positive/negative set."""


class MissingCentroidError(SkelContrastError):
    """A class centroid required for a distance is absent."""


class LengthMismatchError(SkelContrastError):
    """Aligned lists have different lengths."""


class ModalityMismatchError(SkelContrastError):
    """A checkpoint's modality does not match the requested stream."""


class ConfigHashMismatchError(SkelContrastError):
    """Checkpoint was produced under a different model configuration."""
