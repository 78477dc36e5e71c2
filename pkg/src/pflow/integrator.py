"""Fixed-step explicit Euler integration of the learned ODE."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, IntegrationFailure, NumericalFailure
from .velocity_net import field_forward, lipschitz_upper_bound

log = logging.getLogger(__name__)

MAX_STEPS = 10_000


@dataclass(frozen=True)
class FlowConfig:
    n_steps: int = 10
    record_trajectory: bool = False

    def __post_init__(self):
        if not 1 <= self.n_steps <= MAX_STEPS:
            raise ContractViolation(f"n_steps must be in [1, {MAX_STEPS}], got {self.n_steps}")

    @property
    def dt(self):
        return 1.0 / self.n_steps


@dataclass
class Trajectory:
    states: list
    times: list

    def as_array(self):
        return np.stack(self.states)


@dataclass
class EvalCounter:
    """Instrumentation shared between the integrator and the solvers."""

    forward: int = 0
    backward: int = 0
    live_tapes: int = 0
    peak_tapes: int = 0

    def hold(self, n=1):
        self.live_tapes += n
        self.peak_tapes = max(self.peak_tapes, self.live_tapes)

    def release(self, n=1):
        self.live_tapes -= n


def step_times(n_steps):
    return [i / n_steps for i in range(n_steps + 1)]


def flow_forward(params, x0, cfg, counter=None, keep_tapes=None):
    """Integrate ``dx/dt = v(x, t)`` from t=0 to t=1 with ``cfg.n_steps`` Euler steps.

    The field is evaluated at the left endpoint of each step. When
    ``keep_tapes`` is a list, every step's forward tape is appended to it
    (used for reverse accumulation); otherwise each tape is dropped as soon
    as the step is taken. Returns ``(x1, trajectory_or_None)``.
    """
    x = np.array(x0, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.dim:
        raise ContractViolation(f"x0 has shape {x.shape}, field dimension is {params.dim}")
    n = cfg.n_steps
    dt = cfg.dt
    times = step_times(n)
    states = [x.copy()] if cfg.record_trajectory else None
    for i in range(n):
        try:
            v, tape = field_forward(params, x, times[i])
        except NumericalFailure as exc:
            raise IntegrationFailure(f"field evaluation failed at step {i}: {exc}", step=i) from exc
        if counter is not None:
            counter.forward += 1
            counter.hold()
        if keep_tapes is not None:
            keep_tapes.append(tape)
        elif counter is not None:
            counter.release()
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise IntegrationFailure(f"non-finite state after step {i}", step=i)
        if states is not None:
            states.append(x.copy())
    traj = Trajectory(states, times) if states is not None else None
    return x, traj


def gronwall_check(params, pairs, cfg, lipschitz=None):
    """Check ``|psi(a) - psi(b)| <= exp(L_v) |a - b|`` on each pair.

    ``L_v`` defaults to :func:`lipschitz_upper_bound`. Returns a dict with the
    per-pair ratios, violation flags, the max ratio and the bound used.
    """
    lv = lipschitz_upper_bound(params) if lipschitz is None else lipschitz
    bound = math.exp(lv) if lv < 700 else math.inf
    a = np.array([p[0] for p in pairs], dtype=np.float64)
    b = np.array([p[1] for p in pairs], dtype=np.float64)
    fa, _ = flow_forward(params, a, cfg)
    fb, _ = flow_forward(params, b, cfg)
    num = np.linalg.norm(fa - fb, axis=1)
    den = np.linalg.norm(a - b, axis=1)
    ratios = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    violations = ratios > bound
    return {
        "lipschitz": lv,
        "bound": bound,
        "ratios": ratios,
        "violations": violations,
        "n_violations": int(violations.sum()),
        "max_ratio": float(ratios.max()) if len(ratios) else 0.0,
    }


def curvature_profile(traj):
    """Turning angles at interior nodes; zero-length segments are skipped.

    Works on single trajectories (states of shape ``(d,)``) and batched ones
    (``(B, d)``), returning a flat array of angles and the skip count.
    """
    states = traj.as_array()
    if states.shape[0] < 3:
        raise ContractViolation("curvature needs at least 2 steps")
    if states.ndim == 2:
        states = states[:, None, :]
    seg = np.diff(states, axis=0)
    a, b = seg[:-1], seg[1:]
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    ok = (na > 0) & (nb > 0)
    cos = np.sum(a * b, axis=2)[ok] / (na[ok] * nb[ok])
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    skipped = int((~ok).sum())
    if skipped:
        log.info("curvature: skipped %d zero-length segments", skipped)
    return angles, skipped


def trajectory_curvature(traj):
    """Mean turning angle between successive Euler displacements (0 = straight)."""
    angles, _ = curvature_profile(traj)
    return float(angles.mean()) if angles.size else 0.0


def write_trajectory_csv(traj, path):
    states = traj.as_array()
    if states.ndim != 2:
        raise ContractViolation("trajectory CSV holds a single trajectory")
    d = states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", *[f"x{j}" for j in range(d)]])
        for i, (t, s) in enumerate(zip(traj.times, states)):
            w.writerow([i, repr(t), *[repr(float(v)) for v in s]])
