import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pflow.degradations import (
    TASKS,
    LinearOperator,
    Observation,
    adjoint,
    apply,
    blur_matrix_1d,
    degrade,
    naive_inverse,
    observation_bytes,
    observation_from_bytes,
    read_observation,
    task_preset,
    write_observation,
)
from pflow.errors import ConfigurationError, ContractViolation
from pflow.numerics import Rng

ALL_OPS = [
    LinearOperator("identity-denoise", 6, 6, 0.2),
    LinearOperator("gaussian-blur", 6, 8, 0.05, {"kernel_size": 5, "sigma_b": 1.2}),
    LinearOperator("downsample", 8, 8, 0.05, {"factor": 2}),
    LinearOperator("random-mask", 6, 6, 0.01, {"ratio": 0.7, "mask_seed": 3}),
    LinearOperator("box-mask", 8, 8, 0.05, {"box_h": 3, "box_w": 2}),
    *[task_preset(name) for name in TASKS],
]


def test_mask_apply_restricts():
    op = LinearOperator("random-mask", 4, 4, 0.0, {"ratio": 0.5, "mask_seed": 1})
    x = np.arange(16.0)
    assert np.array_equal(apply(op, x), x[op.keep_indices])
    assert op.out_dim == 8


def test_blur_preserves_constants():
    op = task_preset("blur")
    assert np.allclose(apply(op, np.full(256, -0.3)), -0.3, atol=1e-15)


def test_blur_matches_direct_reflect_convolution():
    # independent oracle: numpy reflect padding + explicit 2-D correlation
    k, s = 5, 1.1
    r = k // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / s) ** 2)
    taps /= taps.sum()
    kern = np.outer(taps, taps)
    img = Rng(2).normal((7, 9))
    pad = np.pad(img, r, mode="reflect")
    ref = np.array([[np.sum(pad[i:i + k, j:j + k] * kern) for j in range(9)] for i in range(7)])
    op = LinearOperator("gaussian-blur", 7, 9, 0.0, {"kernel_size": k, "sigma_b": s})
    assert np.allclose(apply(op, img.ravel()), ref.ravel(), atol=1e-14)


def test_blur_matrix_rows_normalised():
    assert np.allclose(blur_matrix_1d(5, 7, 0.75).sum(axis=1), 1.0)


def test_downsample_block_means():
    op = LinearOperator("downsample", 4, 4, 0.0, {"factor": 2})
    assert apply(op, np.arange(16.0)).tolist() == [2.5, 4.5, 10.5, 12.5]


def test_adjoint_trivial_cases():
    op = LinearOperator("random-mask", 3, 3, 0.0, {"ratio": 0.4, "mask_seed": 0})
    r = np.arange(1.0, op.out_dim + 1)
    out = adjoint(op, r)
    assert np.array_equal(out[op.keep_indices], r) and np.count_nonzero(out) == op.out_dim
    r = Rng(1).normal(36)
    assert np.array_equal(adjoint(ALL_OPS[0], r), r)


@pytest.mark.parametrize("op", ALL_OPS, ids=lambda o: f"{o.kind}-{o.height}x{o.width}")
def test_adjoint_identity(op):
    rng = Rng(5)
    for _ in range(100):
        x, r = rng.normal(op.in_dim), rng.normal(op.out_dim)
        assert abs(apply(op, x) @ r - x @ adjoint(op, r)) <= 1e-10


@pytest.mark.parametrize("op", ALL_OPS, ids=lambda o: f"{o.kind}-{o.height}x{o.width}")
def test_linearity(op):
    rng = Rng(6)
    a, b = rng.normal(op.in_dim), rng.normal(op.in_dim)
    alpha, beta = 1.7, -0.4
    assert np.max(np.abs(apply(op, alpha * a + beta * b) - (alpha * apply(op, a) + beta * apply(op, b)))) <= 1e-12
    assert op.out_dim <= op.in_dim


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["random-inpaint", "box-inpaint"]))
def test_mask_projection_property(seed, task):
    op = task_preset(task)
    x = Rng(seed).normal(op.in_dim)
    assert np.array_equal(apply(op, adjoint(op, apply(op, x))), apply(op, x))


def test_contract_violations():
    op = task_preset("sr")
    with pytest.raises(ContractViolation):
        apply(op, np.zeros(10))
    with pytest.raises(ContractViolation):
        adjoint(op, np.zeros(256))


def test_operator_validation():
    with pytest.raises(ConfigurationError):
        LinearOperator("jpeg", 4, 4)
    with pytest.raises(ConfigurationError):
        LinearOperator("downsample", 5, 4, 0.0, {"factor": 2})
    with pytest.raises(ConfigurationError):
        LinearOperator("gaussian-blur", 4, 4, 0.0, {"kernel_size": 4})
    with pytest.raises(ConfigurationError):
        LinearOperator("identity-denoise", 4, 4, -0.1)


def test_task_presets():
    assert task_preset("denoise").noise_sigma == 0.2
    blur = task_preset("blur")
    assert blur.params == {"kernel_size": 7, "sigma_b": 0.75} and blur.noise_sigma == 0.05
    sr = task_preset("sr")
    assert sr.out_dim == 16 and sr.noise_sigma == 0.05
    ri = task_preset("random-inpaint")
    assert ri.out_dim == 256 - round(0.7 * 256) and ri.noise_sigma == 0.01
    box = task_preset("box-inpaint")
    assert box.out_dim == 256 - 25 and box.noise_sigma == 0.05
    hole = np.setdiff1d(np.arange(256), box.keep_indices).reshape(5, 5)
    assert hole[0, 0] == 5 * 16 + 5 and hole[-1, -1] == 9 * 16 + 9  # centred 5x5
    with pytest.raises(ConfigurationError) as info:
        task_preset("colorize")
    assert "random-inpaint" in str(info.value)


def test_degrade_noise_free_and_deterministic():
    op = LinearOperator("downsample", 4, 4, 0.0, {"factor": 2})
    x = Rng(1).normal(16)
    assert np.array_equal(degrade(op, x, Rng(0)).y, apply(op, x))
    op = task_preset("box-inpaint")
    x = Rng(2).normal(256)
    assert np.array_equal(degrade(op, x, Rng(3)).y, degrade(op, x, Rng(3)).y)


def test_degrade_noise_level():
    op = LinearOperator("identity-denoise", 100, 100, 0.2)
    x = Rng(4).normal(10_000)
    obs = degrade(op, x, Rng(5))
    assert 0.19 <= np.std(obs.y - x) <= 0.21
    assert np.array_equal(obs.ground_truth, x)


def test_naive_inverse():
    op = LinearOperator("downsample", 4, 4, 0.0, {"factor": 2})
    up = naive_inverse(op, np.array([1.0, 2.0, 3.0, 4.0])).reshape(4, 4)
    assert up[0].tolist() == [1.0, 1.0, 2.0, 2.0] and up[3].tolist() == [3.0, 3.0, 4.0, 4.0]
    box = task_preset("box-inpaint")
    filled = naive_inverse(box, np.ones(box.out_dim))
    assert filled.sum() == box.out_dim


def test_observation_dims_checked():
    with pytest.raises(ContractViolation):
        Observation(np.zeros(3), task_preset("sr"))


@pytest.mark.parametrize("task", TASKS)
def test_observation_round_trip(task, tmp_path):
    op = task_preset(task)
    obs = degrade(op, Rng(7).uniform(256, -1, 1), Rng(8))
    extras = {"x1_final": Rng(9).normal(256)}
    path = tmp_path / "obs.pfob"
    write_observation(path, obs, extras)
    back, ex = read_observation(path)
    assert back.operator == op
    assert np.array_equal(back.y, obs.y) and np.array_equal(back.ground_truth, obs.ground_truth)
    assert np.array_equal(ex["x1_final"], extras["x1_final"])


def test_observation_record_layout():
    op = LinearOperator("identity-denoise", 1, 2, 0.5)
    blob = observation_bytes(Observation(np.array([1.0, 2.0]), op))
    assert blob[:4] == b"PFOB"
    assert blob[4:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    back, extras = observation_from_bytes(blob)
    assert back.ground_truth is None and extras == {}
    with pytest.raises(ContractViolation):
        observation_from_bytes(b"NOPE" + blob[4:])
