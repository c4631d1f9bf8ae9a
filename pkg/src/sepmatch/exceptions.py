"""Exception hierarchy.

Each class carries the CLI exit code it maps to.
"""


class SepMatchError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class InputError(SepMatchError, ValueError):
    """Malformed or out-of-range input data or configuration."""

    exit_code = 2


class ZeroCellError(InputError):
    """A matching cell that must be strictly positive is zero.

    Attributes:
        cell: the offending arrangement as a 1-based ``(x, y)`` pair, with
            ``0`` standing for singlehood on that side.
    """

    def __init__(self, cell, message=None):
        self.cell = tuple(int(c) for c in cell)
        if message is None:
            message = f"zero or negative mass in cell (x={self.cell[0]}, y={self.cell[1]})"
        super().__init__(message)


class ConvergenceError(SepMatchError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    exit_code = 3


class IdentificationError(SepMatchError, ValueError):
    """The estimating equations do not pin down the parameters.

    Attributes:
        null_direction: a unit vector spanning (part of) the null space of the
            design, when one is available.
    """

    exit_code = 4

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction
