"""Exception hierarchy shared across the package.

Every error the package raises deliberately derives from :class:`NahtmError`
so callers (notably the CLI) can map failure classes to exit codes without
pattern-matching on messages.
"""

__all__ = ["NahtmError", "ShapeError", "NumericError", "DataError", "ConfigError"]


class NahtmError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NahtmError):
    """Tensor or matrix dimensions do not line up."""


class NumericError(NahtmError):
    """A computation left the finite-float domain (NaN/Inf), or an input
    violated a numeric precondition such as strict positivity."""


class DataError(NahtmError):
    """Missing, malformed, or mutually inconsistent data files."""


class ConfigError(NahtmError):
    """Invalid configuration: unknown keys, bad values, impossible splits."""
