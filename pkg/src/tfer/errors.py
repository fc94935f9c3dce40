"""Exception types raised across the package."""


class TferError(Exception):
    """Base class for all package errors."""


class ZeroVector(TferError, ValueError):
    pass


class DimensionMismatch(TferError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class EmptyRetainSet(TferError, ValueError):
    pass


class EmptyForgetSet(TferError, ValueError):
    pass


class UnknownClass(TferError, ValueError):
    pass


class ForgetLabelInProtect(TferError, ValueError):
    pass


class NoActiveTask(TferError, RuntimeError):
    pass


class UnknownTask(TferError, KeyError):
    pass


class InsufficientSamples(TferError, ValueError):
    pass


class OverlappingForgetSets(TferError, ValueError):
    pass


class InvalidTask(TferError, IndexError):
    pass


class NonFiniteLoss(TferError, FloatingPointError):
    """Training produced a NaN/inf loss, gradient or parameter."""


class DegenerateLabels(TferError, ValueError):
    pass


class TooFewPositives(TferError, ValueError):
    pass


class MissingPartition(TferError, ValueError):
    pass


class SingularCovariance(TferError, ValueError):
    pass


class MeanPlacementFailure(TferError, RuntimeError):
    pass


class FormatError(TferError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionMismatch(FormatError):
    pass


class ConfigError(TferError, ValueError):
    """Invalid run configuration. ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
