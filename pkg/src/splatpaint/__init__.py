"""Differentiable CPU Gaussian-splatting engine with per-object
segmentation and localized style transfer."""

from .errors import SplatError, ValidationError, DataError, DivergenceError

__version__ = "0.1.0"

__all__ = [
    "SplatError",
    "ValidationError",
    "DataError",
    "DivergenceError",
    "__version__",
]
