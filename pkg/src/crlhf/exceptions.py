"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical failures with 3.
"""


class CrlhfError(Exception):
    """Base class for all package errors."""


class ValidationError(CrlhfError, ValueError):
    """Input violates a documented invariant."""


class ShapeError(ValidationError):
    """Array dimensions are inconsistent."""


class DomainError(ValidationError):
    """A scalar parameter lies outside its admissible range."""


class SupportError(ValidationError):
    """A reference distribution is zero where the other distribution is not."""


class InfeasibleError(CrlhfError):
    """Slater's condition could not be certified or no feasible point exists."""


class NumericalError(CrlhfError, ArithmeticError):
    """An iterative routine failed to converge or to bracket a root."""
