"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class SimDRCError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SimDRCError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 1)."""


class NumericError(SimDRCError, ArithmeticError):
    """A computation produced a non-finite or undefined value (CLI exit code 3)."""


# dialogue model
class EmptyDialogue(InputError):
    pass


class EmptyUtterance(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# geometry
class ZeroNorm(NumericError):
    def __init__(self, message: str = "vector has zero norm", row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DimensionMismatch(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class IndexOutOfRange(InputError, IndexError):
    pass


class RepresentativeTokenQueried(InputError):
    pass


class SameUtterance(InputError):
    pass


class NoContentTokens(InputError):
    pass


class SingleUtterance(InputError):
    pass


class Undefined(InputError):
    pass


# losses
class MarginOutOfRange(InputError):
    pass


class ConfigError(InputError):
    pass


# encoder / training
class UnknownToken(InputError):
    pass


class SequenceTooLong(InputError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step: int, message: str = "loss became non-finite"):
        self.step = step
        super().__init__(f"step {step}: {message}")


# oracles
class NonFiniteProbe(NumericError):
    def __init__(self, coordinate: tuple[int, int]):
        self.coordinate = coordinate
        super().__init__(f"non-finite function value probing coordinate {coordinate}")
