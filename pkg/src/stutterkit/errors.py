"""Exception types shared across the package.

ValidationError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class ValidationError(ValueError):
    """Bad user input: config values, file contents, shapes, id mismatches."""


class NumericalError(RuntimeError):
    """A computation produced NaN/Inf or left a numeric domain."""


class FeatureFileError(ValidationError):
    """Unreadable feature file. `reason` is one of bad_magic, truncated, dimension."""

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


class CheckpointError(ValidationError):
    """Unreadable or incompatible checkpoint file."""
