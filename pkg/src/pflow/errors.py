"""Exception hierarchy shared by every module.

Each class carries a stable ``code`` used by the CLI as a machine-readable
error class and to pick the process exit status.
"""


class PFlowError(Exception):
    code = "pflow-error"
    exit_status = 1


class ContractViolation(PFlowError, ValueError):
    code = "contract-violation"
    exit_status = 2


class ConfigurationError(PFlowError, ValueError):
    code = "configuration-error"
    exit_status = 3


class CapabilityError(PFlowError):
    code = "capability-error"
    exit_status = 4


class NumericalFailure(PFlowError, ArithmeticError):
    code = "numerical-failure"
    exit_status = 5

    def __init__(self, message, residual=None, where=None):
        super().__init__(message)
        self.residual = residual
        self.where = where


class SingularMatrixError(NumericalFailure):
    code = "singular-matrix"


class IntegrationFailure(NumericalFailure):
    code = "integration-failure"

    def __init__(self, message, step):
        super().__init__(message, where=step)
        self.step = step


class TrainingDiverged(NumericalFailure):
    code = "training-diverged"

    def __init__(self, message, epoch):
        super().__init__(message, where=epoch)
        self.epoch = epoch


class SolverDiverged(NumericalFailure):
    code = "solver-diverged"

    def __init__(self, message, iteration):
        super().__init__(message, where=iteration)
        self.iteration = iteration


class DegenerateInput(PFlowError, ValueError):
    code = "degenerate-input"
    exit_status = 6
