"""Source optimisation through a flow: proxy-gradient loop and full-backprop baseline.

All three solvers share one loop:

    x1 = psi(x0, N)
    x0 <- x0 - eta * g
    x0 <- sqrt(d) * x0 / |x0|      (when projection is enabled)

and differ only in ``g``: ``C * grad_x1 L`` for the proxy solver, the exact
``M_N^T grad_x1 L`` by reverse accumulation for the baseline, and the same
exact gradient from a closed-form ``(I + A/N)^N`` for linear fields.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .degradations import adjoint, apply
from .errors import ConfigurationError, DegenerateInput, SolverDiverged
from .integrator import EvalCounter, FlowConfig, flow_forward
from .numerics import Rng, as_matrix
from .velocity_net import field_vjp

SOLVER_KINDS = ("pflow", "dflow", "oracle")


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 100
    ode_steps: int = 10
    step_size: float = 0.3
    proxy_scalar: float = 1.0
    projection_enabled: bool = True
    latent_penalty: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.ode_steps < 1:
            raise ConfigurationError("ode_steps must be >= 1")
        if not self.step_size >= 0:
            raise ConfigurationError("step_size must be >= 0")
        if not self.proxy_scalar > 0:
            raise ConfigurationError("proxy_scalar must be > 0")
        if self.latent_penalty < 0:
            raise ConfigurationError("latent_penalty must be >= 0")


@dataclass
class RunRecord:
    k: int
    loss: float
    x0_norm: float
    wall_ms: float
    cached_tapes: int
    cosine: float | None = None
    kappa: float | None = None


@dataclass
class SolveResult:
    x0_init: np.ndarray
    x0_final: np.ndarray
    x1_final: np.ndarray
    records: list = field(default_factory=list)
    kind: str = "pflow"
    ode_steps: int = 0
    forward_evals: int = 0
    loop_forward_evals: int = 0
    backward_evals: int = 0
    peak_tapes: int = 0

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])


def data_fidelity_grad(op, x1, y):
    """``0.5 * |H x1 - y|^2`` and its gradient ``H^T (H x1 - y)``."""
    resid = apply(op, x1) - np.asarray(y, dtype=np.float64)
    return 0.5 * float(resid @ resid), adjoint(op, resid)


def sphere_project(x):
    """Rescale ``x`` onto the sphere of radius sqrt(d)."""
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm <= 1e-12:
        raise DegenerateInput(f"cannot project a vector of norm {norm:.3e} onto the sphere")
    return (math.sqrt(x.size) / norm) * x


def _initial_latent(d, cfg, rng):
    rng = rng if rng is not None else Rng(cfg.seed)
    return rng.normal(d)


def _run_loop(kind, d, obs, cfg, rng, forward, gradient):
    """Shared iteration; ``forward(x0) -> (x1, state)``, ``gradient(x0, state, u) -> g``."""
    x0 = _initial_latent(d, cfg, rng)
    x0_init = x0.copy()
    counter = EvalCounter()
    records = []
    for k in range(cfg.iterations):
        start = time.perf_counter()
        x1, state = forward(x0, counter)
        loss, u = data_fidelity_grad(obs.operator, x1, obs.y)
        if not math.isfinite(loss):
            raise SolverDiverged(f"non-finite loss at iteration {k}", iteration=k)
        g = gradient(x0, state, u, counter)
        x0 = x0 - cfg.step_size * g
        if cfg.projection_enabled:
            x0 = sphere_project(x0)
        if not np.all(np.isfinite(x0)):
            raise SolverDiverged(f"non-finite latent at iteration {k}", iteration=k)
        records.append(RunRecord(k, loss, float(np.linalg.norm(x0)),
                                 1e3 * (time.perf_counter() - start), counter.peak_tapes))
    loop_forward = counter.forward
    x1, _ = forward(x0, counter, final=True)
    return SolveResult(
        x0_init=x0_init, x0_final=x0, x1_final=x1, records=records, kind=kind,
        ode_steps=cfg.ode_steps, forward_evals=counter.forward, loop_forward_evals=loop_forward,
        backward_evals=counter.backward, peak_tapes=counter.peak_tapes,
    )


def pflow_solve(params, obs, cfg, rng=None):
    """Proxy-gradient source optimisation: no differentiation through the ODE."""
    flow_cfg = FlowConfig(cfg.ode_steps)

    def forward(x0, counter, final=False):
        x1, _ = flow_forward(params, x0, flow_cfg, counter=counter)
        return x1, None

    def gradient(x0, state, u, counter):
        return cfg.proxy_scalar * u

    return _run_loop("pflow", params.dim, obs, cfg, rng, forward, gradient)


def reverse_accumulate(params, tapes, u, dt, counter=None):
    """``M_N^T u`` by pulling ``u`` back through the cached Euler steps."""
    g = np.array(u, dtype=np.float64)
    for tape in reversed(tapes):
        gx, _ = field_vjp(params, tape, g)
        g = g + dt * gx
        if counter is not None:
            counter.backward += 1
    return g


def dflow_solve(params, obs, cfg, rng=None):
    """Exact-gradient baseline: backpropagates through every Euler step.

    The objective is ``L(psi(x0), y) + latent_penalty / 2 * |x0|^2``.
    """
    flow_cfg = FlowConfig(cfg.ode_steps)

    def forward(x0, counter, final=False):
        if final:
            x1, _ = flow_forward(params, x0, flow_cfg, counter=counter)
            return x1, None
        tapes = []
        x1, _ = flow_forward(params, x0, flow_cfg, counter=counter, keep_tapes=tapes)
        return x1, tapes

    def gradient(x0, tapes, u, counter):
        g = reverse_accumulate(params, tapes, u, flow_cfg.dt, counter)
        counter.release(len(tapes))
        return g + cfg.latent_penalty * x0

    return _run_loop("dflow", params.dim, obs, cfg, rng, forward, gradient)


def euler_matrix(a, n_steps):
    """``(I + A/N)^N``: the exact Euler flow map of ``v = A x``."""
    a = as_matrix(a, "A")
    return np.linalg.matrix_power(np.eye(a.shape[0]) + a / n_steps, n_steps)


def exact_linear_oracle(a, obs, cfg, rng=None):
    """Exact-gradient loop for the linear field ``v = A x`` using the closed-form flow map."""
    m = euler_matrix(a, cfg.ode_steps)

    def forward(x0, counter, final=False):
        return m @ x0, None

    def gradient(x0, state, u, counter):
        return m.T @ u + cfg.latent_penalty * x0

    return _run_loop("oracle", m.shape[0], obs, cfg, rng, forward, gradient)


def solve(kind, params, obs, cfg, rng=None):
    if kind == "pflow":
        return pflow_solve(params, obs, cfg, rng)
    if kind == "dflow":
        return dflow_solve(params, obs, cfg, rng)
    if kind == "oracle":
        return exact_linear_oracle(linear_matrix(params), obs, cfg, rng)
    raise ConfigurationError(f"unknown solver {kind!r}; valid: {', '.join(SOLVER_KINDS)}")


def linear_matrix(params):
    """``A`` of a field that is exactly ``v = A x``; the oracle accepts nothing else."""
    d = params.dim
    w, b = params.weights[0], params.biases[0]
    if (len(params.weights) != 1 or params.activation != "identity"
            or np.any(w[:, d:] != 0.0) or np.any(b != 0.0)):
        raise ConfigurationError("the oracle solver needs a linear field v = A x (single identity layer, no bias or time terms)")
    return w[:, :d].copy()


def write_solve_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "loss", "x0_norm", "wall_ms", "cached_tapes"])
        for r in result.records:
            w.writerow([r.k, repr(r.loss), repr(r.x0_norm), f"{r.wall_ms:.3f}", r.cached_tapes])
