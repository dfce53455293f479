"""Exception types shared across the package.

Every contract violation raises a subclass of DtpError so callers can
distinguish "you fed me garbage" from genuine bugs.
"""


class DtpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DtpError, ValueError):
    """An operand's dimensions violate an operation's contract."""


class GraphError(DtpError, RuntimeError):
    """Backward was asked to do something the tape cannot support."""


class MissingGradient(DtpError, RuntimeError):
    """An optimizer step found a registered parameter without a gradient."""


class ConfigError(DtpError, ValueError):
    """A configuration value is outside its legal range."""


class ImageError(DtpError, ValueError):
    """An image file or pixel array violates the I/O contract."""


class NanLoss(DtpError, RuntimeError):
    """A loss term became non-finite during optimization."""

    def __init__(self, iteration, term):
        self.iteration = iteration
        self.term = term
        super().__init__(f"non-finite {term} loss at iteration {iteration}")


class WeightFormatError(DtpError, ValueError):
    """Base for .dtpw parsing failures."""


class BadMagic(WeightFormatError):
    """File does not start with the DTPW magic bytes."""


class UnsupportedVersion(WeightFormatError):
    """File declares a format version this reader does not know."""


class TruncatedPayload(WeightFormatError):
    """File ends before the declared tensor data does."""


class DuplicateTensorName(WeightFormatError):
    """Two tensors in one file share a name."""


class UnsupportedDtype(WeightFormatError):
    """A tensor declares a dtype code this reader does not know."""


class WeightStoreMismatch(DtpError, ValueError):
    """A weight store does not match the network being built from it."""
