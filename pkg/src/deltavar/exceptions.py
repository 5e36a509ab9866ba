"""Package-wide exception types.

Every error deliberately raised by this package derives from DeltaVarError so
callers (and the CLI) can distinguish handled failures from genuine bugs.
"""


class DeltaVarError(Exception):
    """Base class for all errors raised by deltavar."""


class StructuralError(DeltaVarError):
    """Shape mismatches, cross-tape variables, bad block layouts, misuse."""


class NumericalError(DeltaVarError):
    """Failed factorizations, singular systems, non-finite intermediate values."""


class TrainingError(DeltaVarError):
    """Training diverged. Carries the step index at which it happened."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(DeltaVarError):
    """An iterative solve (fixed point, retraining) did not converge."""


class ResourceError(DeltaVarError):
    """A desk-scale cap (dense Hessian size, LOO dataset size) was exceeded."""


class DegenerateEigenvalueError(DeltaVarError):
    """Requested eigenvalue is too close to its neighbors for a stable gradient."""

    def __init__(self, message: str, gap: float | None = None):
        super().__init__(message)
        self.gap = gap


class ConfigError(DeltaVarError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""
