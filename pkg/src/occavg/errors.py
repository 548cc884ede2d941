"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line driver uses when
the error escapes a command.
"""


class OccavgError(Exception):
    exit_code = 5


class InvalidArgument(OccavgError, ValueError):
    exit_code = 2


class ConfigError(InvalidArgument):
    exit_code = 2


class GuardError(InvalidArgument):
    """A statistical estimator was asked to run below its quality guard."""

    exit_code = 3


class ResourceLimitError(OccavgError):
    exit_code = 3


class ModelViolation(OccavgError):
    """User-declared modelling assumptions do not hold (box exits, constants)."""

    exit_code = 4

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class NumericalFailure(OccavgError):
    exit_code = 5


class InfeasibleError(NumericalFailure):
    pass


class ConvergenceFailure(NumericalFailure):
    pass
