"""Exception types shared by every module."""


class SiltError(Exception):
    """Base class for all library errors."""


class InputError(SiltError, ValueError):
    """Arguments violate a documented precondition."""


class BudgetError(InputError):
    """A dense computation would exceed its configured work budget."""


class NumericalError(SiltError, ArithmeticError):
    """A factorization, quadrature or integration step failed."""
