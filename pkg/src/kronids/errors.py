"""Exception types shared across the package.

The CLI maps these onto process exit codes: ``DataError`` -> 2,
``NumericalError`` -> 3.
"""


class KronidsError(Exception):
    """Base class for all package errors."""


class ShapeError(KronidsError, ValueError):
    """Operands have incompatible shapes."""


class DataError(KronidsError, ValueError):
    """Input data or on-disk artifacts are missing, malformed or inconsistent."""


class NumericalError(KronidsError, ArithmeticError):
    """A computation produced NaN/Inf or otherwise cannot proceed."""


class FormatError(DataError):
    """A serialized model file is corrupt or has the wrong magic/version."""
