"""stutterkit: weakly supervised stuttering event detection toolkit."""

from .errors import CheckpointError, FeatureFileError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "FeatureFileError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
