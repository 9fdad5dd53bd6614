"""Adversarial latent-feature affect estimation with sequence attention."""

__version__ = "0.1.0"

from .errors import (
    AnclafError,
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateSeriesError,
    DivergenceError,
    ShapeError,
)
from .tensor import Tensor

__all__ = [
    "AnclafError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DegenerateSeriesError",
    "DivergenceError",
    "ShapeError",
    "Tensor",
    "__version__",
]
