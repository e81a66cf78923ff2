"""Exception hierarchy shared across the package."""


class SmdsError(Exception):
    """Base class for all package errors."""


class ModelFormatError(SmdsError, ValueError):
    """Malformed or inconsistent serialized model / dataset bundle."""


class SimulationError(SmdsError, ArithmeticError):
    """Numerical failure while sampling a series (e.g. rate overflow)."""


class FilterError(SmdsError, ArithmeticError):
    """Numerical failure inside the forward filter; carries the step index."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class SmootherError(SmdsError, ArithmeticError):
    """Numerical failure inside the backward smoother."""


class ConfigError(SmdsError, ValueError):
    """Invalid experiment / EM / simulation configuration."""
