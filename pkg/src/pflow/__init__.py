"""Proxy-gradient source optimisation for linear inverse problems on a small flow-matching stack."""

from .cfm import ToyDataset, TrainConfig, train
from .degradations import LinearOperator, Observation, degrade, task_preset
from .errors import (
    CapabilityError,
    ConfigurationError,
    ContractViolation,
    DegenerateInput,
    IntegrationFailure,
    NumericalFailure,
    PFlowError,
    SingularMatrixError,
    SolverDiverged,
    TrainingDiverged,
)
from .integrator import FlowConfig, flow_forward
from .numerics import Rng
from .solver import SolverConfig, dflow_solve, exact_linear_oracle, pflow_solve
from .velocity_net import VelocityFieldParams, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
