"""Exception families. Each carries the CLI exit code of its category."""


class LBMError(Exception):
    exit_code = 1


class ConfigurationError(LBMError, ValueError):
    exit_code = 2


class DivergenceError(LBMError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, iteration=None, node=None):
        super().__init__(message)
        self.iteration = iteration
        self.node = node


class ConvergenceError(LBMError):
    exit_code = 4


class ProtocolError(LBMError):
    exit_code = 6
