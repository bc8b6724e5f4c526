"""Exception types. Exit codes follow the CLI convention."""


class EbamaError(Exception):
    exit_code = 4


class InputError(EbamaError, ValueError):
    """Invalid argument or malformed input."""

    exit_code = 2


class ConfigurationError(EbamaError):
    """Missing adapter, model, or capability."""

    exit_code = 3


class DegenerateInputError(InputError):
    """Input for which the requested quantity is undefined (e.g. zero-norm map)."""


class GuidanceError(EbamaError):
    """Non-finite gradient during a latent update."""

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown
