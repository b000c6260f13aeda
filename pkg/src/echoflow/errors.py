"""Exception types shared across the package."""


class EchoFlowError(Exception):
    """Base class for all echoflow errors."""


class InvalidImage(EchoFlowError, ValueError):
    """Raised when pixel data is non-finite or otherwise unusable."""


class FormatError(EchoFlowError, ValueError):
    """Raised when a file does not conform to its declared format."""


class DimensionMismatch(EchoFlowError, ValueError):
    """Raised when array shapes are incompatible with an operation."""


class InsufficientFrames(EchoFlowError, ValueError):
    """Raised when a sequence has fewer frames than required."""


class ScaleError(EchoFlowError, ValueError):
    """Raised when an image is too small for the requested number of scales."""


class DivergenceError(EchoFlowError, RuntimeError):
    """Raised when training produces a non-finite loss.

    Carries the optimization step at which divergence was detected.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class InsufficientData(EchoFlowError, ValueError):
    """Raised when a time series is too short for spectral analysis."""


class NoDominantPeak(EchoFlowError, RuntimeError):
    """Raised when no in-band spectral peak clears the detection criterion."""
