"""Exception types shared across the library."""


class DinaError(Exception):
    """Base class for all library errors."""


class DimensionError(DinaError, ValueError):
    """Operand shapes do not conform."""


class NumericError(DinaError, ValueError):
    """Non-finite values where finite arithmetic is required."""


class InvalidWindowError(DinaError, ValueError):
    """Window geometry (k, delta) is impossible for the given extent."""


class ArgumentError(DinaError, ValueError):
    """An argument is outside the documented domain."""


class ConfigError(DinaError, ValueError):
    """Model configuration is inconsistent or unsupported."""


class ArchiveError(DinaError, ValueError):
    """Weight archive is malformed, truncated, or inconsistent."""


class StateError(DinaError, RuntimeError):
    """Required saved state (forward intermediates) is missing."""
