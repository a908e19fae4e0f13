"""Exception types raised across the package."""


class ViewCoError(Exception):
    """Base class for all package errors."""


class ShapeError(ViewCoError, ValueError):
    pass


class ConfigError(ViewCoError, ValueError):
    pass


class DegenerateVector(ViewCoError, ValueError):
    pass


class InvalidTemperature(ViewCoError, ValueError):
    pass


class NormalizationError(ViewCoError, ValueError):
    pass


class NonFiniteObjective(ViewCoError, FloatingPointError):
    pass


class EmptyText(ViewCoError, ValueError):
    pass


class AmbiguousCaption(ViewCoError, ValueError):
    pass


class CheckpointMismatch(ViewCoError):
    pass


class DatasetNotFound(ViewCoError, FileNotFoundError):
    pass


class AugmentationError(ViewCoError):
    pass


class FormatError(ViewCoError, ValueError):
    pass


class EmptyOverlap(ViewCoError, ValueError):
    pass
