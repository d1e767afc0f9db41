"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericFailure -> 3.
"""


class CloudcastError(Exception):
    """Base class for all package errors."""


class ConfigError(CloudcastError, ValueError):
    """Invalid configuration or usage."""


class ShapeError(CloudcastError, ValueError):
    """Operands have incompatible shapes."""


class DataError(CloudcastError, ValueError):
    """Input data is missing, malformed or insufficient."""


class NumericFailure(CloudcastError, ArithmeticError):
    """A NaN or infinity appeared during a computation."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by '{op}'")
