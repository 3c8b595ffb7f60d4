"""Exception types raised across the package."""


class BarmissError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BarmissError, ValueError):
    """Inconsistent dimensions, out-of-range parameters or exceeded budgets."""


class ConvergenceError(BarmissError, RuntimeError):
    """The solver produced a non-finite objective."""

    def __init__(self, message, iteration=None, row=None):
        super().__init__(message)
        self.iteration = iteration
        self.row = row


class IngestError(BarmissError):
    """Raw incident data could not be turned into an event matrix."""


class TaylorValidityWarning(UserWarning):
    """A point lies outside the region where the Taylor expansion is trusted."""
