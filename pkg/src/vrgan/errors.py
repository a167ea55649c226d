"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """A configuration is internally inconsistent or incompatible with the data."""


class DegenerateImageError(ValueError):
    """An image cannot be normalized (for example, it is constant)."""


class CheckpointMismatchError(ValueError):
    """A checkpoint was produced by a different model specification."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during training or inference.

    ``snapshot`` carries whatever diagnostic values were available at the
    point of failure (loss terms, batch indices, epoch/step counters).
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})
