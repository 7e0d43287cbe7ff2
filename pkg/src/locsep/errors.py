"""Exception types shared across the toolkit.

Exit-code mapping used by the CLI: ValidationError/ConfigError -> 1,
everything else that escapes -> 2.
"""


class LocsepError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(LocsepError, ValueError):
    """Invalid input data or parameters (geometry outside room, bad ranges...)."""


class ConfigError(LocsepError, ValueError):
    """Inconsistent or unusable configuration (geometry mismatch, missing file...)."""


class DimensionError(LocsepError, ValueError):
    """Array shapes incompatible with the requested operation."""


class NoEstimateError(LocsepError, RuntimeError):
    """An estimator could not produce a result (e.g. all-zero input)."""


class StateError(LocsepError, RuntimeError):
    """Operation called in an invalid order (e.g. backward before forward)."""
