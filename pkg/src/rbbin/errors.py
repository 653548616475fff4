"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class BinarizationError(Exception):
    exit_code = 4


class DimensionError(BinarizationError, ValueError):
    exit_code = 2


class ImageLoadError(BinarizationError, OSError):
    exit_code = 3


class UnsupportedFormatError(ImageLoadError):
    pass


class EmptyImageError(ImageLoadError):
    pass


class SingularSystemError(BinarizationError, ArithmeticError):
    """A banded system hit a non-positive pivot."""


class DegenerateFitError(BinarizationError):
    """A rank-one fit could not be computed (singular update)."""


class StageError(BinarizationError):
    """Every lambda on the grid failed for one boosting stage."""


class UndefinedMetricError(BinarizationError, ValueError):
    """The metric has no value for this ground truth (e.g. empty foreground)."""
