"""Exception types shared across the package."""


class TwinQuantError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(TwinQuantError, ValueError):
    """Operand shapes are incompatible."""


class FormatError(TwinQuantError, ValueError):
    """A code, file or header does not match the expected format."""


class StaleCacheError(FormatError):
    """A calibration cache was produced for a different model."""


class UnknownSiteError(TwinQuantError, KeyError):
    """A layer or site id is not part of the model topology."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown site"


class InvariantViolation(TwinQuantError, RuntimeError):
    """A runtime self-check failed."""
