"""Exception types raised across the package."""


class DistillError(Exception):
    """Base class for all package errors."""


class ContractViolation(DistillError, ValueError):
    """A caller broke a documented precondition (bad action index, bad partition...)."""


class ConfigError(DistillError, ValueError):
    pass


class ConvergenceError(DistillError, ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class ObservationLookupError(DistillError, KeyError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index

    def __str__(self):
        return self.args[0]


class EmptySupportError(DistillError, ValueError):
    """Resampling was asked for on a dataset whose weights are all zero."""


class BudgetError(DistillError, ValueError):
    pass


class TreeParseError(DistillError, ValueError):
    def __init__(self, message, line, column):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


class StageError(DistillError, RuntimeError):
    """Wraps any failure inside a pipeline run with the stage it happened in."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
