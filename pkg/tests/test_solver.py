import csv
import math

import numpy as np
import pytest

from conftest import central_difference
from pflow.degradations import LinearOperator, Observation, degrade, task_preset
from pflow.diagnostics import build_jacobian_chain, toy_task_analogs
from pflow.errors import ConfigurationError, DegenerateInput, SolverDiverged
from pflow.cfm import ToyDataset
from pflow.integrator import FlowConfig, flow_forward
from pflow.numerics import Rng
from pflow.solver import (
    SolverConfig,
    data_fidelity_grad,
    dflow_solve,
    euler_matrix,
    exact_linear_oracle,
    linear_matrix,
    pflow_solve,
    reverse_accumulate,
    solve,
    sphere_project,
    write_solve_csv,
)
from pflow.velocity_net import linear_field, random_params


def identity_obs(y, sigma=0.0):
    y = np.asarray(y, dtype=np.float64)
    return Observation(y, LinearOperator("identity-denoise", 1, y.size, sigma))


def spd(d, seed, lo=0.2, hi=1.0):
    q, _ = np.linalg.qr(Rng(seed).normal((d, d)))
    return q @ np.diag(np.linspace(lo, hi, d)) @ q.T


def test_data_fidelity_examples():
    obs = identity_obs([0.0, 0.0])
    loss, grad = data_fidelity_grad(obs.operator, np.array([1.0, 0.0]), obs.y)
    assert loss == 0.5 and grad.tolist() == [1.0, 0.0]
    loss, grad = data_fidelity_grad(obs.operator, np.array([0.3, 0.4]), np.array([0.3, 0.4]))
    assert loss == 0.0 and not grad.any()


@pytest.mark.parametrize("task", ["random-inpaint", "box-inpaint", "blur", "sr"])
def test_data_fidelity_grad_finite_differences(task):
    op = task_preset(task, 6, 6) if task != "sr" else LinearOperator("downsample", 6, 6, 0.0, {"factor": 2})
    rng = Rng(3)
    x1, y = rng.normal(op.in_dim), rng.normal(op.out_dim)
    _, grad = data_fidelity_grad(op, x1, y)
    fd = central_difference(lambda z: data_fidelity_grad(op, z, y)[0], x1)
    assert np.max(np.abs(grad - fd)) <= 1e-7


def test_sphere_project_examples():
    assert sphere_project(np.array([3.0, 0.0, 0.0, 0.0])).tolist() == [2.0, 0.0, 0.0, 0.0]
    x = np.array([1.0, 1.0, 1.0, 1.0])
    assert np.max(np.abs(sphere_project(x) - x)) <= 1e-15
    z = sphere_project(Rng(1).normal(100))
    assert abs(np.linalg.norm(z) - 10.0) <= 1e-12
    with pytest.raises(DegenerateInput):
        sphere_project(np.zeros(3))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(proxy_scalar=0.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(ode_steps=0)
    with pytest.raises(ConfigurationError):
        solve("adam", linear_field(np.eye(2)), identity_obs([0, 0]), SolverConfig())


def test_zero_step_leaves_latent():
    p = random_params(2, 1)
    cfg = SolverConfig(iterations=5, ode_steps=4, step_size=0.0, projection_enabled=False, seed=9)
    res = pflow_solve(p, identity_obs([0.2, -0.1]), cfg)
    assert np.array_equal(res.x0_final, res.x0_init)
    assert np.array_equal(res.x0_init, Rng(9).normal(2))
    assert np.array_equal(res.x1_final, flow_forward(p, res.x0_init, FlowConfig(4))[0])


@pytest.mark.parametrize("eta", [0.1, 0.5, 1.3])
def test_zero_field_closed_form(eta):
    y = Rng(2).normal(5)
    k = 12
    cfg = SolverConfig(iterations=k, ode_steps=3, step_size=eta, projection_enabled=False, seed=4)
    res = pflow_solve(linear_field(np.zeros((5, 5))), identity_obs(y), cfg)
    expected = y + (1 - eta) ** k * (res.x0_init - y)
    assert np.allclose(res.x0_final, expected, rtol=1e-12, atol=1e-12)


def test_records_and_projection_invariant():
    cfg = SolverConfig(iterations=15, ode_steps=5, step_size=0.4, seed=1)
    res = pflow_solve(random_params(3, 2), identity_obs([0.5, 0.1, -0.3], 0.1), cfg)
    assert [r.k for r in res.records] == list(range(15))
    assert all(abs(r.x0_norm / math.sqrt(3) - 1) <= 1e-9 for r in res.records)


def test_dflow_one_step_zero_field_matches_pflow():
    p = linear_field(np.zeros((4, 4)))
    obs = identity_obs(Rng(5).normal(4))
    cfg = SolverConfig(iterations=6, ode_steps=1, step_size=0.3, seed=2)
    a, b = pflow_solve(p, obs, cfg), dflow_solve(p, obs, cfg)
    assert np.array_equal(a.x0_final, b.x0_final) and np.array_equal(a.losses, b.losses)


@pytest.mark.parametrize("n", [1, 4, 10])
def test_reverse_accumulation_matches_matrix_power(n):
    a = spd(4, n, -0.5, 0.8)
    p = linear_field(a)
    tapes = []
    flow_forward(p, Rng(6).normal(4), FlowConfig(n), keep_tapes=tapes)
    u = Rng(7).normal(4)
    g = reverse_accumulate(p, tapes, u, 1.0 / n)
    assert np.max(np.abs(g - euler_matrix(a, n).T @ u)) <= 1e-9


def test_reverse_accumulation_matches_dense_chain():
    p = random_params(4, 8, hidden=(12, 12))
    x0 = Rng(8).normal(4)
    tapes = []
    flow_forward(p, x0, FlowConfig(5), keep_tapes=tapes)
    chain = build_jacobian_chain(p, x0, 5)
    rng = Rng(9)
    for _ in range(10):
        u = rng.normal(4)
        assert np.max(np.abs(reverse_accumulate(p, tapes, u, 0.2) - chain.cumulative.T @ u)) <= 1e-8


def test_dflow_tracks_oracle():
    a = spd(3, 11, 0.1, 0.9)
    obs = identity_obs(Rng(12).normal(3))
    cfg = SolverConfig(iterations=30, ode_steps=6, step_size=0.2, seed=3, latent_penalty=0.05)
    d, o = dflow_solve(linear_field(a), obs, cfg), exact_linear_oracle(a, obs, cfg)
    assert np.max(np.abs(d.losses - o.losses)) <= 1e-9
    assert np.max(np.abs(d.x0_final - o.x0_final)) <= 1e-9


def test_oracle_zero_field_is_plain_descent():
    obs = identity_obs(Rng(13).normal(3))
    cfg = SolverConfig(iterations=8, ode_steps=2, step_size=0.25, projection_enabled=False)
    o = exact_linear_oracle(np.zeros((3, 3)), obs, cfg)
    p = pflow_solve(linear_field(np.zeros((3, 3))), obs, cfg)
    assert np.array_equal(o.x0_final, p.x0_final)


def test_oracle_dispatch_requires_linear_field():
    obs = identity_obs([0.0, 1.0])
    a = spd(2, 1)
    assert np.array_equal(linear_matrix(linear_field(a)), a)
    res = solve("oracle", linear_field(a), obs, SolverConfig(iterations=2, ode_steps=3))
    assert res.kind == "oracle"
    with pytest.raises(ConfigurationError):
        solve("oracle", random_params(2, 0), obs, SolverConfig(iterations=2))


def test_counters():
    p = random_params(2, 0)
    obs = identity_obs([0.1, 0.2])
    res = pflow_solve(p, obs, SolverConfig(iterations=3, ode_steps=7))
    assert (res.peak_tapes, res.forward_evals, res.backward_evals) == (1, 3 * 7 + 7, 0)
    assert res.loop_forward_evals == 21
    res = dflow_solve(p, obs, SolverConfig(iterations=1, ode_steps=7))
    assert res.peak_tapes == 7 and res.backward_evals == 7
    assert [r.cached_tapes for r in res.records] == [7]


def test_determinism():
    p = random_params(3, 4)
    obs = degrade(LinearOperator("random-mask", 1, 3, 0.05, {"ratio": 0.4, "mask_seed": 1}), Rng(1).normal(3), Rng(2))
    cfg = SolverConfig(iterations=10, ode_steps=4, seed=17)
    for kind in ("pflow", "dflow"):
        a, b = solve(kind, p, obs, cfg), solve(kind, p, obs, cfg)
        assert a.x0_final.tobytes() == b.x0_final.tobytes() and a.x1_final.tobytes() == b.x1_final.tobytes()
        assert a.losses.tobytes() == b.losses.tobytes()


def test_diverging_step_reports_iteration():
    cfg = SolverConfig(iterations=5, ode_steps=1, step_size=1e200, projection_enabled=False)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(SolverDiverged) as info:
        pflow_solve(linear_field(np.zeros((2, 2))), identity_obs([1.0, 1.0]), cfg)
    assert info.value.iteration == 1


def test_solve_csv(tmp_path):
    res = pflow_solve(random_params(2, 0), identity_obs([0.0, 0.0]), SolverConfig(iterations=4, ode_steps=2))
    path = tmp_path / "solve.csv"
    write_solve_csv(res, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["k", "loss", "x0_norm", "wall_ms", "cached_tapes"] and len(rows) == 5
    assert float(rows[1][1]) == res.records[0].loss


def test_mask_analog_loss_decreases_on_trained_model(mixture_params):
    op = toy_task_analogs()["random-inpaint"]
    truth = ToyDataset("gauss-mixture-2d").sample(Rng(77), 20)
    for seed in range(20):
        obs = degrade(op, truth[seed], Rng(seed))
        res = pflow_solve(mixture_params, obs, SolverConfig(iterations=100, ode_steps=10, step_size=0.3, seed=seed))
        final, _ = data_fidelity_grad(op, res.x1_final, obs.y)
        assert final < res.records[0].loss, seed
