"""Exception hierarchy shared across the package."""


class DmemError(Exception):
    """Base class for all package errors."""


class DataError(DmemError, ValueError):
    """Malformed or inconsistent input data."""


class MissingMacroError(DataError):
    """Low-frequency lags required by a MIDAS filter are not available."""


class ConstraintError(DmemError, ValueError):
    """Parameters outside the admissible region of a model."""


class MomentError(DmemError, ValueError):
    """A requested moment does not exist for the given parameters."""


class ConvergenceError(DmemError, RuntimeError):
    """An optimizer failed to reach its convergence criterion.

    Parameters
    ----------
    message : str
        Human readable description.
    best : dict, optional
        Best point reached, keyed by parameter name.
    trace : str, optional
        Optimizer status summary.
    """

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace


class IdentificationError(DmemError, ValueError):
    """Information matrix is singular; some direction is not identified."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class ConfigError(DmemError, ValueError):
    """Invalid run configuration."""
