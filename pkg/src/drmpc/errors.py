"""Exception hierarchy shared by every module."""


class DrmpcError(Exception):
    """Base class for all package errors."""


class InputError(DrmpcError, ValueError):
    """Malformed arguments: wrong shapes, NaN/Inf, out-of-range scalars."""


class ConfigurationError(DrmpcError, ValueError):
    """A geometric or experiment setup that cannot be used (empty polytope, ...)."""


class NumericalError(DrmpcError, RuntimeError):
    """A numerical routine failed to deliver a certified answer."""

    def __init__(self, message, residuals=None, dump=None):
        super().__init__(message)
        self.residuals = residuals
        self.dump = dump


class InfeasibleError(DrmpcError, RuntimeError):
    """An optimization subproblem (or its fallback) has no feasible point."""

    def __init__(self, message, state_dump=None):
        super().__init__(message)
        self.state_dump = state_dump


class NonConvergenceError(DrmpcError, RuntimeError):
    """A rollout exceeded its step cap before reaching the target."""


class SafeSetError(DrmpcError, RuntimeError):
    """The sampled safe set was emptied by pruning."""
