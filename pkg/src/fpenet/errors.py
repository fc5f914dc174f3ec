"""Exception types shared across the package."""


class FpeError(Exception):
    pass


class ConfigError(FpeError, ValueError):
    """An invalid configuration value or combination of values."""


class DimensionError(FpeError, ValueError):
    """A tensor shape does not fit the operation.

    ``axis`` names the offending axis (``"batch"``, ``"channels"``,
    ``"height"``, ``"width"`` or ``"rank"``).
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class DataError(FpeError, ValueError):
    pass


class WeightFileError(FpeError):
    pass


class CorruptWeightsError(WeightFileError):
    pass


class MagicMismatchError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class MissingTensorError(WeightFileError):
    pass


class UnexpectedTensorError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class DivergenceError(FpeError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class UndefinedMetricError(FpeError, ValueError):
    """A metric has no defined value (e.g. an empty confusion matrix)."""
