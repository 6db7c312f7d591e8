"""Exception types raised across the package."""


class PVAdaError(Exception):
    """Base class for all package errors."""


class ValidationError(PVAdaError, ValueError):
    """Bad user input: wrong shapes, out-of-range settings, empty data."""


class ShapeError(ValidationError):
    """Operand shapes do not conform for a tensor primitive."""

    def __init__(self, primitive, message):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")


class BoundsError(PVAdaError, IndexError):
    """An index points outside the indexed axis."""


class ContractError(PVAdaError, RuntimeError):
    """An API was used outside its contract (e.g. backward on a non-scalar)."""


class CloudFormatError(ValidationError):
    """A point-cloud or checkpoint file could not be parsed."""

    def __init__(self, message, position=None):
        self.position = position
        super().__init__(message if position is None else f"{message} (at {position})")


class CheckpointError(CloudFormatError):
    """Malformed checkpoint bytes."""


class UndefinedBaselineError(ValidationError):
    """A corruption-error denominator is zero."""


class NumericalError(PVAdaError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, lr=None):
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        super().__init__(f"{message} (epoch={epoch}, batch={batch}, lr={lr})")
