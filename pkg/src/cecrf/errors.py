"""Exception types shared across the package."""


class CecrfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CecrfError, ValueError):
    """Shapes or sizes are inconsistent."""


class NumericError(CecrfError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class CapacityError(CecrfError, ValueError):
    """An instance is too large for exhaustive enumeration."""


class BnStatisticsError(CecrfError, ValueError):
    """Too few samples to compute batch-normalization statistics."""


class TrainingError(CecrfError, RuntimeError):
    """Optimization diverged."""


class ModelFormatError(CecrfError, ValueError):
    """A model file could not be decoded."""


class VersionError(ModelFormatError):
    pass


class ShapeError(ModelFormatError, DimensionError):
    pass


class DatasetParseError(CecrfError, ValueError):
    """A dataset file is malformed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DatasetShapeError(DatasetParseError, DimensionError):
    pass
