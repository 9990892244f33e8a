"""Exception types shared across the pipeline."""


class ConfigError(Exception):
    """Raised for invalid or missing configuration values."""


class DataError(Exception):
    """Raised for unreadable or structurally broken input data."""


class DivergenceError(Exception):
    """Raised when the factorization objective becomes non-finite."""
