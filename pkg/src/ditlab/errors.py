"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """Raised for invalid model or training configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite.

    The message carries the path of the diagnostic snapshot written just
    before aborting.
    """


class NotFitted(RuntimeError):
    """Raised when an estimator method requires fit() to have run first."""
