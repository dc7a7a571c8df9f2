"""Exception and warning types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes or feature widths are incompatible."""


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""


class ValidationError(ValueError):
    """Input data violates a structural requirement (e.g. a sink state)."""


class ParseError(ValueError):
    """A dataset record could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SolverError(RuntimeError):
    """A linear solve failed (singular or ill-posed system)."""


class UnsupportedModeError(SolverError):
    """The requested solver path does not support this map set."""


class TapeStateError(RuntimeError):
    """An autodiff operation was requested on a tensor outside a live tape."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; ``diagnostics`` holds the dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceWarning(UserWarning):
    """A fixed-point iteration hit ``max_iter`` without meeting its tolerance."""
