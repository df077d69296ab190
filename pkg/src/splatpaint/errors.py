"""Exception types shared across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class ValidationError(SplatError):
    """Invalid argument or violated invariant."""


class DataError(SplatError):
    """Malformed or inconsistent on-disk data."""


class DivergenceError(SplatError):
    """Optimization produced a non-finite quantity."""
