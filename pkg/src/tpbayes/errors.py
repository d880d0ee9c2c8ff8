"""Exception types raised across the package."""


class TPBayesError(Exception):
    """Base class for all package errors."""


class ParameterError(TPBayesError, ValueError):
    """Invalid argument value or shape."""


class DomainError(TPBayesError, ValueError):
    """A point lies outside the unit cube."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UnsupportedOrderError(ParameterError):
    """Derivative order is not below the spline order."""


class OverParameterizationError(ParameterError):
    """More basis functions than observations."""


class FactorizationError(TPBayesError, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NoiseModeError(TPBayesError):
    """Operation requires a different noise model."""


class InsufficientSamplesWarning(UserWarning):
    """Too few Monte Carlo draws for the requested quantile level."""


class DataError(ParameterError):
    """Malformed input data file."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
