import math

import numpy as np
import pytest

from pflow.degradations import LinearOperator, Observation
from pflow.diagnostics import (
    alignment_from_gradients,
    alignment_sweep,
    anisotropy_growth_experiment,
    build_jacobian_chain,
    chain_from_factors,
    complexity_probe,
    perturbation_experiment,
    toy_task_analogs,
)
from pflow.errors import CapabilityError
from pflow.integrator import FlowConfig, flow_forward
from pflow.numerics import Rng
from pflow.solver import SolverConfig, dflow_solve, pflow_solve, reverse_accumulate
from pflow.velocity_net import linear_field, random_params


def test_zero_field_chain_is_identity():
    chain = build_jacobian_chain(linear_field(np.zeros((3, 3))), Rng(0).normal(3), 6)
    assert np.array_equal(chain.cumulative, np.eye(3))
    assert chain.kappas == [1.0] * 6 and len(chain.jacobians) == 6


def test_diagonal_chain_closed_form():
    a, n = 0.7, 8
    chain = build_jacobian_chain(linear_field(np.diag([a, -a])), np.array([0.3, 0.1]), n)
    expected = ((1 + a / n) / (1 - a / n)) ** n
    assert math.isclose(chain.kappas[-1], expected, rel_tol=1e-9)
    assert all(k >= 1.0 for k in chain.kappas)


def test_chain_product_matches_stepwise():
    p = random_params(3, 2, hidden=(10,))
    chain = build_jacobian_chain(p, Rng(1).normal(3), 7)
    m = np.eye(3)
    for f in chain.factors:
        m = f @ m
    assert np.linalg.norm(chain.cumulative - m) <= 1e-9 * np.linalg.norm(m)


def test_chain_matches_reverse_accumulation():
    p = random_params(2, 3, hidden=(16, 16))
    x0 = Rng(2).normal(2)
    chain = build_jacobian_chain(p, x0, 10)
    tapes = []
    flow_forward(p, x0, FlowConfig(10), keep_tapes=tapes)
    for u in Rng(3).normal((10, 2)):
        assert np.max(np.abs(chain.cumulative.T @ u - reverse_accumulate(p, tapes, u, 0.1))) <= 1e-8


def test_trained_chain_matches_reverse_accumulation(moons_params):
    rng = Rng(10)
    for x0 in rng.normal((5, 2)):
        chain = build_jacobian_chain(moons_params, x0, 10)
        tapes = []
        flow_forward(moons_params, x0, FlowConfig(10), keep_tapes=tapes)
        for u in rng.normal((4, 2)):
            assert np.max(np.abs(chain.cumulative.T @ u - reverse_accumulate(moons_params, tapes, u, 0.1))) <= 1e-8


def test_chain_capability_limit():
    with pytest.raises(CapabilityError):
        build_jacobian_chain(random_params(65, 0, hidden=(2,)), np.zeros(65), 2)


def test_diag_example_kappa():
    chain = chain_from_factors([np.diag([1.2, 0.8])] * 10)
    assert math.isclose(chain.kappas[-1], 1.5**10, rel_tol=1e-9)


def test_anisotropy_rows():
    rows = anisotropy_growth_experiment([0.0, 0.5], [1, 5, 10], dim=3)
    assert len(rows) == 6
    for r in rows:
        if r["epsilon"] == 0.0:
            assert r["kappa_aligned"] == pytest.approx(1.0, abs=1e-12)
        assert abs(r["kappa_aligned"] - r["prod_local_kappa"]) <= 1e-9 * r["prod_local_kappa"]
        assert r["kappa_aligned"] >= r["lower_bound"] - 1e-9
        assert r["kappa_misaligned"] <= r["prod_local_kappa"] * (1 + 1e-9)
        assert r["misaligned_slack"] >= 1 - 1e-9


def test_alignment_constructed_cases():
    u = Rng(4).normal(5)
    rec = alignment_from_gradients(u, u)
    assert rec.cosine == pytest.approx(1.0, abs=1e-15) and rec.alpha_hat == pytest.approx(1.0, abs=1e-15)
    rec = alignment_from_gradients(u, -u)
    assert rec.cosine == pytest.approx(-1.0, abs=1e-15)
    assert alignment_from_gradients(np.zeros(5), u) is None


def test_alignment_sweep_identity_and_negated_fields():
    obs = Observation(np.array([0.4, -0.2]), LinearOperator("identity-denoise", 1, 2, 0.0))
    cfg = SolverConfig(iterations=10, ode_steps=1, step_size=0.2, seed=5)
    rep = alignment_sweep(linear_field(np.zeros((2, 2))), obs, cfg, probes=25)
    assert len(rep.records) == 25 and rep.fraction_positive == 1.0
    assert np.allclose(rep.cosines, 1.0, atol=1e-15)
    assert {r.solve for r in rep.records} == {0, 1, 2}
    # one Euler step of v = -2x gives M = -I
    rep = alignment_sweep(linear_field(-2 * np.eye(2)), obs, cfg, probes=10)
    assert rep.violations == 10 and np.allclose(rep.cosines, -1.0, atol=1e-15)


def test_alignment_skips_zero_gradient():
    # y equals the flow output of x0 exactly: u = 0 at every probe
    obs = Observation(np.zeros(2), LinearOperator("identity-denoise", 1, 2, 0.0))
    cfg = SolverConfig(iterations=3, ode_steps=1, projection_enabled=False)
    rep = alignment_sweep(linear_field(-np.eye(2)), obs, cfg, probes=4)
    assert rep.skipped == 4 and not rep.records


def test_toy_analogs_are_2d():
    ops = toy_task_analogs()
    assert sorted(ops) == sorted(["denoise", "blur", "sr", "random-inpaint", "box-inpaint"])
    assert all(op.in_dim == 2 for op in ops.values())


def test_perturbation_trivial_cases():
    p = linear_field(np.zeros((3, 3)))
    rows = perturbation_experiment(p, np.ones(3), 4, [0.0], probes=3)
    assert all(r["relative_error"] == 0.0 for r in rows)
    u = Rng(6).normal(3)
    rows = perturbation_experiment(p, np.ones(3), 4, [0.1, 2.0], probes=5, u=u)
    for r in rows:
        assert r["relative_error"] == pytest.approx(r["scale"] / np.linalg.norm(u), rel=1e-14)
        assert not r["violation"]


def test_perturbation_bound_random_and_aligned():
    p = random_params(2, 7, hidden=(16,), scale=1.5)
    rows = perturbation_experiment(p, Rng(8).normal(2), 10, [1e-3, 0.1, 1.0], probes=20, rng=Rng(9))
    assert not any(r["violation"] for r in rows)
    rows = perturbation_experiment(p, Rng(8).normal(2), 10, [0.1], probes=1, aligned=True)
    assert abs(rows[0]["relative_error"] - rows[0]["bound"]) <= 1e-6 * rows[0]["bound"]


def test_complexity_probe_counts():
    p = random_params(2, 0)
    obs = Observation(np.array([0.2, 0.1]), LinearOperator("identity-denoise", 1, 2, 0.0))
    assert complexity_probe(pflow_solve(p, obs, SolverConfig(iterations=3, ode_steps=7))) == (1, 28, 0)
    assert complexity_probe(pflow_solve(p, obs, SolverConfig(iterations=3, ode_steps=14)))[0] == 1
    assert complexity_probe(dflow_solve(p, obs, SolverConfig(iterations=1, ode_steps=7)))[0] == 7
