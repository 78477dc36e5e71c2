"""Conditional flow-matching training on synthetic data."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, ContractViolation, NumericalFailure, TrainingDiverged
from .numerics import Rng
from .velocity_net import field_forward, field_vjp, init_params

log = logging.getLogger(__name__)

DATASET_KINDS = ("gauss-mixture-2d", "two-moons-2d", "checkerboard-2d", "synth-gray-16x16")
COUPLINGS = ("independent", "minibatch-ot")
DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------- datasets

def _gauss_mixture(rng, n, n_components=8, radius=0.6, std=0.06):
    k = rng.integers(0, n_components, n)
    angle = 2.0 * math.pi * k / n_components
    centers = radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + std * rng.normal((n, 2))


def _two_moons(rng, n, noise=0.05):
    upper = rng.uniform(n) < 0.5
    theta = math.pi * rng.uniform(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) + noise * rng.normal((n, 2))
    # raw moons span about [-1, 2] x [-0.5, 1]; map into [-1, 1]^2
    return (pts - np.array([0.5, 0.25])) / np.array([1.6, 1.6])


def _checkerboard(rng, n, cells=4):
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        pts = rng.uniform((2 * (n - filled) + 8, 2), -1.0, 1.0)
        idx = np.floor((pts + 1.0) * cells / 2.0).astype(int)
        keep = pts[(idx.sum(axis=1) % 2) == 0]
        take = min(len(keep), n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def render_shapes(rng, n, size=16, supersample=4):
    """Anti-aliased single ellipse or rectangle on a flat background, in [-1, 1].

    Position, size, intensity and background level are random; coverage is
    estimated on a ``supersample`` x ``supersample`` grid per pixel.
    """
    s = supersample
    coords = (np.arange(size * s) + 0.5) / (size * s)  # unit square
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy = rng.uniform(n, 0.3, 0.7)
    cx = rng.uniform(n, 0.3, 0.7)
    ry = rng.uniform(n, 0.12, 0.3)
    rx = rng.uniform(n, 0.12, 0.3)
    is_rect = rng.uniform(n) < 0.5
    fg = rng.uniform(n, 0.2, 1.0)
    bg = rng.uniform(n, -1.0, -0.6)
    dy = (yy[None] - cy[:, None, None]) / ry[:, None, None]
    dx = (xx[None] - cx[:, None, None]) / rx[:, None, None]
    inside_ellipse = dy * dy + dx * dx <= 1.0
    inside_rect = (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
    inside = np.where(is_rect[:, None, None], inside_rect, inside_ellipse)
    coverage = inside.reshape(n, size, s, size, s).mean(axis=(2, 4))
    img = bg[:, None, None] + (fg - bg)[:, None, None] * coverage
    return img.reshape(n, size * size)


_SAMPLERS = {
    "gauss-mixture-2d": (_gauss_mixture, 2),
    "two-moons-2d": (_two_moons, 2),
    "checkerboard-2d": (_checkerboard, 2),
    "synth-gray-16x16": (render_shapes, 256),
}


@dataclass(frozen=True)
class ToyDataset:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _SAMPLERS:
            raise ConfigurationError(f"unknown dataset {self.kind!r}; valid: {', '.join(DATASET_KINDS)}")

    @property
    def dim(self):
        return _SAMPLERS[self.kind][1]

    @property
    def image_shape(self):
        return (16, 16) if self.kind == "synth-gray-16x16" else (1, self.dim)

    def sample(self, rng, n):
        fn = _SAMPLERS[self.kind][0]
        return np.clip(fn(rng, n, **self.params), -1.0, 1.0)


# ---------------------------------------------------------------- objective

def interpolate(x0, x1, t):
    """Straight-line conditional path: returns ``(x_t, x1 - x0)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ContractViolation(f"x0 {x0.shape} and x1 {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractViolation("t must lie in [0, 1]")
    tt = t[:, None] if (t.ndim == 1 and x0.ndim == 2) else t
    return (1.0 - tt) * x0 + tt * x1, x1 - x0


@dataclass
class CouplingBatch:
    x0: np.ndarray
    x1: np.ndarray

    def __len__(self):
        return len(self.x0)


def cfm_loss(params, batch, t_samples):
    """Mean squared regression error onto ``x1 - x0`` and its parameter gradient."""
    t_samples = np.asarray(t_samples, dtype=np.float64)
    if t_samples.shape != (len(batch),):
        raise ContractViolation(f"need one t per pair ({len(batch)}), got {t_samples.shape}")
    xt, target = interpolate(batch.x0, batch.x1, t_samples)
    v, tape = field_forward(params, xt, t_samples)
    resid = v - target
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not math.isfinite(loss):
        raise NumericalFailure("non-finite CFM loss")
    _, grad = field_vjp(params, tape, 2.0 * resid / len(batch))
    return loss, grad


# ---------------------------------------------------------------- assignment

def ot_pair(batch_x0, batch_x1):
    """Permutation ``perm`` minimising ``sum_i |x0[i] - x1[perm[i]]|^2`` exactly."""
    x0 = np.asarray(batch_x0, dtype=np.float64)
    x1 = np.asarray(batch_x1, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
        x1 = x1[:, None]
    if x0.shape != x1.shape:
        raise ContractViolation(f"batches differ in shape: {x0.shape} vs {x1.shape}")
    if len(x0) > 128:
        raise ContractViolation(f"ot_pair limited to 128 points, got {len(x0)}")
    cost = np.sum((x0[:, None, :] - x1[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 200
    learning_rate: float = 1e-4
    coupling: str = "independent"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    samples_per_epoch: int = 2048
    hidden: tuple = (128, 128, 128)
    time_features: int = 4

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise ConfigurationError(f"unknown coupling {self.coupling!r}; valid: {', '.join(COUPLINGS)}")
        if self.coupling == "minibatch-ot" and self.batch_size < 2:
            raise ConfigurationError("minibatch-ot coupling needs batch_size >= 2")
        if self.coupling == "minibatch-ot" and self.batch_size > 128:
            raise ConfigurationError("minibatch-ot coupling supports batch_size <= 128")
        if self.batch_size < 1 or self.epochs < 1 or self.samples_per_epoch < 1:
            raise ConfigurationError("batch_size, epochs and samples_per_epoch must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")


class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_ms: float


def make_batch(x0, x1, coupling):
    if coupling == "minibatch-ot":
        x1 = x1[ot_pair(x0, x1)]
    return CouplingBatch(x0, x1)


def train(dataset, config, rng=None, log_records=None, init=None):
    """Fit a velocity field by CFM regression with Adam.

    Per-epoch ``EpochRecord``s are appended to ``log_records`` when given.
    """
    rng = rng if rng is not None else Rng(config.seed)
    init_rng, data_rng = rng.spawn(0), rng.spawn(1)
    params = init if init is not None else init_params(
        dataset.dim, init_rng, hidden=config.hidden, time_features=config.time_features
    )
    theta = params.flatten()
    opt = Adam(theta.size, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    records = log_records if log_records is not None else []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        erng = data_rng.spawn(epoch)
        data = dataset.sample(erng, config.samples_per_epoch)
        order = erng.permutation(len(data))
        losses = []
        for lo in range(0, len(data), config.batch_size):
            x1 = data[order[lo:lo + config.batch_size]]
            x0 = erng.normal(x1.shape)
            batch = make_batch(x0, x1, config.coupling)
            t = erng.uniform(len(batch))
            loss, grad = cfm_loss(params, batch, t)
            if loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {loss:.3e} exceeded {DIVERGENCE_LIMIT:g} in epoch {epoch}", epoch)
            theta = opt.step(theta, grad)
            params = params.with_flat(theta)
            losses.append(loss)
        rec = EpochRecord(epoch, float(np.mean(losses)), 1e3 * (time.perf_counter() - start))
        records.append(rec)
        log.debug("epoch %d loss %.5f", epoch, rec.mean_loss)
    return params


def write_training_log(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "wall_ms"])
        for r in records:
            w.writerow([r.epoch, repr(r.mean_loss), f"{r.wall_ms:.3f}"])


def energy_distance(x, y):
    """V-statistic energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def mean_dist(a, b):
        total = 0.0
        for lo in range(0, len(a), 512):
            diff = a[lo:lo + 512, None, :] - b[None, :, :]
            total += np.sqrt(np.sum(diff * diff, axis=2)).sum()
        return total / (len(a) * len(b))

    return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
