"""Exception types raised across the package."""


class PldaError(Exception):
    """Base class for all package errors."""


class DataError(PldaError, ValueError):
    """Malformed input data, labels, or arguments that conflict with the data."""


class NumericalError(PldaError, ArithmeticError):
    """A factorization failed or a likelihood became non-finite."""
