class PathattrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PathattrError, ValueError):
    """An input's shape disagrees with what the operation expects."""


class NumericError(PathattrError, ArithmeticError):
    """A non-finite value appeared in a computation."""
