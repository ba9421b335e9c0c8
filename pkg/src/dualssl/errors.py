"""Exception types shared across the package.

The CLI maps each family to a process exit code, so callers should raise the
most specific class that applies.
"""


class DualSSLError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DualSSLError, ValueError):
    """Invalid configuration value or combination of values."""


class DataError(DualSSLError):
    """Problem with an input dataset or file."""


class FormatError(DataError):
    """A file does not follow the expected binary layout."""


class ShapeError(DualSSLError, ValueError):
    """Incompatible tensor or image dimensions."""


class ContractError(DualSSLError, RuntimeError):
    """An operation was called outside of its documented preconditions."""


class NumericalError(DualSSLError, FloatingPointError):
    """A forward computation produced NaN or Inf from finite inputs."""
