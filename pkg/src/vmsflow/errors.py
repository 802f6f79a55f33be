"""Exception hierarchy.

Each category maps to a CLI exit code.
"""


class VMSFlowError(Exception):
    exit_code = 1


class ConfigError(VMSFlowError, ValueError):
    exit_code = 2


class InputError(ConfigError):
    """Invalid arguments to a constructor or operation."""


class SolverError(VMSFlowError, RuntimeError):
    exit_code = 3


class NonConvergenceError(SolverError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class NumericalError(VMSFlowError, ArithmeticError):
    exit_code = 4


class DomainError(NumericalError, ValueError):
    """Evaluation point outside a non-periodic domain."""


class DataError(NumericalError, ValueError):
    """Problem data violating a compatibility condition."""


class IOFailure(VMSFlowError, OSError):
    exit_code = 5
