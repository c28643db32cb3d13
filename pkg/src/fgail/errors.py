"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class FgailError(Exception):
    exit_code = 1


class ConfigurationError(FgailError, ValueError):
    """Bad shapes, unknown names, invalid hyperparameters."""

    exit_code = 1


class NumericError(FgailError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""

    exit_code = 2

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment
