"""Jacobian-chain conditioning, gradient alignment and perturbation experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .degradations import LinearOperator
from .errors import CapabilityError, NumericalFailure
from .integrator import FlowConfig, flow_forward
from .numerics import Rng, condition_number, svd
from .solver import data_fidelity_grad, reverse_accumulate, sphere_project
from .velocity_net import MAX_JACOBIAN_DIM, field_jacobian


@dataclass
class JacobianChain:
    jacobians: list
    factors: list
    prefixes: list          # prefixes[k-1] = A_{k-1} ... A_0
    kappas: list            # condition number of each prefix
    local_kappas: list      # condition number of each factor
    states: list = field(default_factory=list)

    @property
    def cumulative(self):
        return self.prefixes[-1]


def _kappa(m, where):
    try:
        return condition_number(m)
    except NumericalFailure as exc:
        raise NumericalFailure(f"SVD failed at step {where}: {exc}", residual=exc.residual, where=where) from exc


def chain_from_factors(factors):
    """Ordered product ``A_{N-1} ... A_0`` with per-prefix and per-factor conditioning."""
    d = factors[0].shape[0]
    m = np.eye(d)
    prefixes, kappas, local = [], [], []
    for i, a in enumerate(factors):
        m = a @ m
        prefixes.append(m)
        kappas.append(_kappa(m, i))
        local.append(_kappa(a, i))
    return JacobianChain([], list(factors), prefixes, kappas, local)


def build_jacobian_chain(params, x0, n_steps):
    """Per-step Jacobians along the Euler trajectory from ``x0`` and their product."""
    d = params.dim
    if d > MAX_JACOBIAN_DIM:
        raise CapabilityError(f"dense Jacobian chain limited to d <= {MAX_JACOBIAN_DIM} (d={d})")
    _, traj = flow_forward(params, x0, FlowConfig(n_steps, record_trajectory=True))
    dt = 1.0 / n_steps
    jacobians = [field_jacobian(params, traj.states[i], traj.times[i]) for i in range(n_steps)]
    chain = chain_from_factors([np.eye(d) + dt * j for j in jacobians])
    chain.jacobians = jacobians
    chain.states = traj.states
    return chain


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.normal((d, d)))
    return q * np.sign(np.diag(r))


def anisotropy_growth_experiment(epsilons, ns, dim=2, rng=None):
    """Condition-number growth of products of anisotropic factors.

    Each factor has singular values ``1 + delta`` and ``1 - delta`` (the rest 1)
    with ``(1 + delta) / (1 - delta) = 1 + eps``. In the aligned case all
    factors share singular vectors; in the misaligned case each factor is
    conjugated by an independent random rotation.
    """
    rng = rng if rng is not None else Rng(0)
    rows = []
    for eps in epsilons:
        delta = eps / (2.0 + eps)
        sv = np.ones(dim)
        sv[0], sv[-1] = 1.0 + delta, 1.0 - delta
        base = np.diag(sv)
        for n in ns:
            aligned = chain_from_factors([base] * n)
            prod_local = float(np.prod(aligned.local_kappas))
            mis_rng = rng.spawn(int(n * 1000 + round(eps * 1e6)))
            mis = []
            for _ in range(n):
                q = _random_rotation(mis_rng, dim)
                mis.append(q @ base @ q.T)
            misaligned = chain_from_factors(mis)
            rows.append({
                "epsilon": float(eps),
                "n": int(n),
                "kappa_aligned": aligned.kappas[-1],
                "prod_local_kappa": prod_local,
                "lower_bound": (1.0 + eps) ** n,
                "kappa_misaligned": misaligned.kappas[-1],
                "misaligned_slack": prod_local / misaligned.kappas[-1],
            })
    return rows


@dataclass
class AlignmentRecord:
    progress: float
    cosine: float
    alpha_hat: float
    k: int = 0
    solve: int = 0


@dataclass
class AlignmentReport:
    records: list
    skipped: int = 0

    @property
    def cosines(self):
        return np.array([r.cosine for r in self.records])

    @property
    def fraction_positive(self):
        return float(np.mean(self.cosines > 0)) if self.records else math.nan

    @property
    def violations(self):
        return int(np.sum(self.cosines <= 0))


def alignment_from_gradients(u, g, progress=0.0, k=0, solve=0):
    """Alignment between proxy direction ``u`` and true gradient ``g = M^T u``; None if degenerate."""
    nu, ng = float(np.linalg.norm(u)), float(np.linalg.norm(g))
    if nu == 0.0 or ng == 0.0:
        return None
    dot = float(u @ g)
    return AlignmentRecord(progress, max(-1.0, min(1.0, dot / (nu * ng))), dot / (nu * nu), k, solve)


def alignment_sweep(params, obs, cfg, probes, rng=None):
    """Cosine between true and proxy gradients along proxy-gradient solves.

    Every iteration of a solve is one probe, tagged with progress ``k / K``;
    further solves (independently seeded) are run until ``probes`` records
    exist. ``g = M_N^T u`` comes from reverse accumulation, so no dense
    Jacobian is needed and ``u^T M_N u = <u, g>``.
    """
    rng = rng if rng is not None else Rng(cfg.seed)
    flow_cfg = FlowConfig(cfg.ode_steps)
    records, skipped, solve_idx = [], 0, 0
    while len(records) + skipped < probes:
        x0 = rng.spawn(solve_idx).normal(params.dim)
        for k in range(cfg.iterations):
            if len(records) + skipped >= probes:
                break
            tapes = []
            x1, _ = flow_forward(params, x0, flow_cfg, keep_tapes=tapes)
            _, u = data_fidelity_grad(obs.operator, x1, obs.y)
            g = reverse_accumulate(params, tapes, u, flow_cfg.dt)
            rec = alignment_from_gradients(u, g, k / cfg.iterations, k, solve_idx)
            if rec is None:
                skipped += 1
            else:
                records.append(rec)
            x0 = x0 - cfg.step_size * cfg.proxy_scalar * u
            if cfg.projection_enabled:
                x0 = sphere_project(x0)
        solve_idx += 1
    return AlignmentReport(records, skipped)


def toy_task_analogs():
    """Five 2-D stand-ins for the image tasks, on a 1 x 2 pixel grid."""
    return {
        "denoise": LinearOperator("identity-denoise", 1, 2, 0.2),
        "blur": LinearOperator("gaussian-blur", 1, 2, 0.05, {"kernel_size": 3, "sigma_b": 0.75}),
        "sr": LinearOperator("downsample", 1, 2, 0.05, {"factor_h": 1, "factor_w": 2}),
        "random-inpaint": LinearOperator("random-mask", 1, 2, 0.01, {"ratio": 0.5, "mask_seed": 0}),
        "box-inpaint": LinearOperator("box-mask", 1, 2, 0.05, {"box_h": 1, "box_w": 1, "top": 0, "left": 0}),
    }


def perturbation_experiment(params, x0, n_steps, noise_scales, probes=10, rng=None, u=None, aligned=False):
    """Amplification of a perturbation ``xi`` of the terminal gradient.

    For each scale, ``xi`` of that norm is added to ``u = grad_x1 L``; the
    relative change of the pulled-back gradient ``|M^T xi| / |M^T u|`` is
    compared to ``kappa(M) |xi| / |u|``. With ``aligned=True``, ``u`` and
    ``xi`` are placed on the bottom and top left-singular vectors of ``M``,
    where the bound is attained.
    """
    rng = rng if rng is not None else Rng(0)
    chain = build_jacobian_chain(params, x0, n_steps)
    m = chain.cumulative
    kappa = chain.kappas[-1]
    d = m.shape[0]
    if aligned:
        _, left, _ = svd(m)
        u = left[:, -1]
    elif u is None:
        u = rng.normal(d)
    u = np.asarray(u, dtype=np.float64)
    g0 = m.T @ u
    rows = []
    for scale in noise_scales:
        for p in range(probes):
            if aligned:
                xi = scale * left[:, 0]
            else:
                direction = rng.normal(d)
                xi = scale * direction / np.linalg.norm(direction)
            dg = m.T @ xi
            rel = float(np.linalg.norm(dg) / np.linalg.norm(g0))
            bound = kappa * float(np.linalg.norm(xi)) / float(np.linalg.norm(u))
            rows.append({
                "scale": float(scale),
                "probe": p,
                "relative_error": rel,
                "bound": bound,
                "kappa": kappa,
                "violation": rel > bound * (1.0 + 1e-12),
            })
    return rows


def complexity_probe(result):
    """``(peak_tapes, forward_evals, backward_evals)`` of an instrumented solve."""
    return result.peak_tapes, result.forward_evals, result.backward_evals
