"""Exception types shared across the package.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`ConvergenceError` to exit code 3.
"""


class ValidationError(ValueError):
    """Input data or parameters violate a documented contract."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before meeting tolerance."""
