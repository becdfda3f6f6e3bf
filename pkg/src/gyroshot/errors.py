"""Exception hierarchy.

Every error raised on purpose by this package derives from GyroshotError so the
CLI can report a machine-readable class name on stderr and exit nonzero.
"""

from __future__ import annotations


class GyroshotError(Exception):
    """Base class for all errors raised by gyroshot."""


class DomainError(GyroshotError, ValueError):
    """A numeric argument left the mathematical domain of an operation.

    Examples: arctanh argument with magnitude >= 1, a vanishing Mobius
    denominator, a point outside the ball where one is required.
    """


class ShapeError(GyroshotError, ValueError):
    """Operand shapes are incompatible with the operation's contract."""


class TapeError(GyroshotError, RuntimeError):
    """Misuse of the autodiff tape.

    Raised for a non-scalar backward root or for mixing variables that live
    on different tapes in one expression.
    """


class ConfigError(GyroshotError, ValueError):
    """A configuration value or key is invalid."""


class DataFormatError(GyroshotError, ValueError):
    """A dataset or checkpoint file does not match the documented layout."""


class InsufficientDataError(GyroshotError, ValueError):
    """The dataset cannot supply the requested episode."""


class TrainingDivergedError(GyroshotError, RuntimeError):
    """The training loss became NaN or infinite."""
