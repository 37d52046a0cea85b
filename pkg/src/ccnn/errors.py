"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid, contradictory, or unknown run configuration."""


class DataError(ValueError):
    """Unreadable or malformed input data."""


class FormatError(DataError):
    """Malformed, truncated, or corrupted model/feature file."""


class NumericalError(RuntimeError):
    """Training produced non-finite values or diverged."""
