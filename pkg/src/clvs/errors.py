"""Exception types shared across the package."""


class ClvsError(Exception):
    """Base class for all package errors."""


class ConfigError(ClvsError, ValueError):
    """Invalid configuration: bad dimensions, hyperparameters or config fields."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class InputError(ClvsError, ValueError):
    """Malformed operation input (length mismatch, out-of-vocabulary token...)."""


class InvariantError(ClvsError, RuntimeError):
    """An internal invariant was violated; indicates corrupted state."""


class ProtocolError(ClvsError, RuntimeError):
    """A stateful hook was driven out of order."""


class TraceParseError(ClvsError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceValidationError(ClvsError, ValueError):
    pass


class UndefinedStatisticError(ClvsError, ValueError):
    pass


class NonConvergenceError(ClvsError, RuntimeError):
    pass
