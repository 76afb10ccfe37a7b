"""Exception hierarchy shared by every module of the package."""


class NlhomogError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NlhomogError, ValueError):
    pass


class DomainError(NlhomogError, ValueError):
    pass


class ResourceError(NlhomogError, MemoryError):
    pass


class SolverError(NlhomogError, RuntimeError):
    """A linear or nonlinear solve failed; ``report`` carries diagnostics when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonConvergenceError(SolverError):
    pass


class NumericalError(SolverError):
    pass


class CoverageError(NlhomogError, ValueError):
    """A slope left the range covered by a tabulated homogenized Lagrangian."""

    def __init__(self, message, needed_low=None, needed_high=None):
        super().__init__(message)
        self.needed_low = needed_low
        self.needed_high = needed_high


class ConsistencyError(NlhomogError, RuntimeError):
    pass


class EnsembleError(NlhomogError, RuntimeError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}


class InsufficientDataError(NlhomogError, ValueError):
    pass
