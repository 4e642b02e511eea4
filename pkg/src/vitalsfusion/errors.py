"""Exception hierarchy shared by every stage of the pipeline."""


class VitalsError(Exception):
    """Base class for all errors raised by vitalsfusion."""


class InputError(VitalsError, ValueError):
    """Arguments violate an operation's preconditions."""


class DimensionError(InputError):
    """Array shapes are inconsistent or invalid."""


class RangeError(InputError):
    """A numeric range is empty or a request falls outside the valid domain."""


class ValidationError(InputError):
    """A value is outside its physiological or documented range."""


class DegenerateInputError(InputError):
    """Input carries no information (e.g. a constant vector for a correlation)."""


class FormatError(VitalsError):
    """A file is missing, truncated or cannot be parsed."""


class IntegrityError(VitalsError):
    """On-disk pieces of a recording disagree with each other."""


class SyncGapError(VitalsError):
    """Master-clock timestamps could not be matched within tolerance.

    ``gaps`` holds ``(start_ms, end_ms)`` pairs of the unmatched master intervals.
    """

    def __init__(self, message, gaps=()):
        super().__init__(message)
        self.gaps = list(gaps)


class CompatibilityError(VitalsError):
    """A stored artifact was produced for a different model configuration."""


class DivergenceError(VitalsError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, batch=None, layer=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.layer = layer
