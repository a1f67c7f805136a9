"""Exception hierarchy shared by the library, the service and the CLI."""


class ShapingError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(ShapingError, ValueError):
    """Malformed argument to a numerical routine."""


class ConfigError(ShapingError, ValueError):
    """Invalid or inconsistent configuration."""


class UnsupportedChannelError(ConfigError):
    """Operation not defined for the requested channel (e.g. backprop through BPS)."""


class DegenerateConstellationError(InputError):
    """All constellation points are zero, so the power normalization is undefined."""


class NumericalBreakdown(ShapingError, ArithmeticError):
    """Cholesky or linear solve failed inside the cubature Kalman filter."""

    exit_code = 2

    def __init__(self, message, iteration=None, hyperparams=None):
        super().__init__(message)
        self.iteration = iteration
        self.hyperparams = hyperparams

    def __str__(self):
        msg = super().__str__()
        extra = []
        if self.iteration is not None:
            extra.append(f"iteration={self.iteration}")
        if self.hyperparams is not None:
            extra.append(f"hyperparams={self.hyperparams}")
        return f"{msg} ({', '.join(extra)})" if extra else msg


class SearchFailure(ShapingError):
    """Every cell of a hyperparameter grid search diverged."""

    exit_code = 2

    def __init__(self, message, outcomes):
        super().__init__(message)
        self.outcomes = outcomes


class ConstellationFileError(ShapingError, OSError):
    """Constellation file could not be read or failed validation."""

    exit_code = 3
