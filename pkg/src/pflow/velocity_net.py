"""MLP velocity field v(x, t) with exact reverse-mode derivatives.

The network input is ``[x, tau(t)]`` where ``tau(t) = [t, sin(2 pi k t),
cos(2 pi k t) for k = 1..F]``. Hidden layers use ``tanh`` (or identity, for
linear test fields); the output layer is affine.

All evaluation functions accept a single point (``x`` of shape ``(d,)``)
or a batch (``x`` of shape ``(B, d)``, ``t`` scalar or ``(B,)``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ContractViolation, NumericalFailure
from .numerics import Rng, as_matrix, spectral_norm

MAGIC = b"PFLW"
FORMAT_VERSION = 1
ACTIVATIONS = ("identity", "tanh")
MAX_JACOBIAN_DIM = 64


def time_features(t, n_freq):
    """Sinusoidal embedding of shape ``(B, 1 + 2 * n_freq)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    cols = [t]
    for k in range(1, n_freq + 1):
        cols.append(np.sin(2.0 * math.pi * k * t))
        cols.append(np.cos(2.0 * math.pi * k * t))
    return np.stack(cols, axis=1)


@dataclass
class VelocityFieldParams:
    layer_dims: list
    weights: list
    biases: list
    time_features: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_dims = [int(n) for n in self.layer_dims]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ContractViolation("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expect or b.shape != (expect[0],):
                raise ContractViolation(f"layer {i}: weight {w.shape}/bias {b.shape}, expected {expect}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractViolation(f"layer {i} has non-finite parameters")
        if self.layer_dims[0] != self.dim + self.n_time_inputs:
            raise ContractViolation(
                f"input width {self.layer_dims[0]} != d ({self.dim}) + time features ({self.n_time_inputs})"
            )

    @property
    def dim(self):
        return self.layer_dims[-1]

    @property
    def n_time_inputs(self):
        return 1 + 2 * self.time_features

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, flat):
        """New params with the same architecture and values from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ContractViolation(f"flat vector has {flat.shape}, expected ({self.n_params},)")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(flat[pos:pos + b.size].copy())
            pos += b.size
        return VelocityFieldParams(list(self.layer_dims), weights, biases, self.time_features, self.activation)


def init_params(d, rng, hidden=(128, 128, 128), time_features=4, activation="tanh"):
    """Glorot-uniform weights, zero biases."""
    dims = [d + 1 + 2 * time_features, *hidden, d]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform((fan_out, fan_in), -limit, limit))
        biases.append(np.zeros(fan_out))
    return VelocityFieldParams(dims, weights, biases, time_features, activation)


def linear_field(a, time_features=0):
    """Params for the exactly linear field ``v(x, t) = A x``."""
    a = as_matrix(a, "A")
    d = a.shape[0]
    if a.shape != (d, d):
        raise ContractViolation(f"linear field needs a square matrix, got {a.shape}")
    n_time = 1 + 2 * time_features
    w = np.zeros((d, d + n_time))
    w[:, :d] = a
    return VelocityFieldParams([d + n_time, d], [w], [np.zeros(d)], time_features, "identity")


@dataclass
class ForwardTape:
    """Layer inputs and pre-activations for one (batched) evaluation."""

    inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    single: bool = False

    @property
    def n_layers(self):
        return len(self.inputs)


def _activate(z, activation):
    return np.tanh(z) if activation == "tanh" else z


def _batch(params, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.dim:
        raise ContractViolation(f"x has shape {x.shape}, field dimension is {params.dim}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(xb.shape[0], float(t))
    if t.shape != (xb.shape[0],):
        raise ContractViolation(f"t has shape {t.shape}, expected scalar or ({xb.shape[0]},)")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractViolation("t must lie in [0, 1]")
    return xb, t, single


def field_forward(params, x, t):
    """Evaluate the field; returns ``(v, tape)``."""
    xb, tb, single = _batch(params, x, t)
    h = np.concatenate([xb, time_features(tb, params.time_features)], axis=1)
    tape = ForwardTape(single=single)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ w.T + b
        if not np.all(np.isfinite(z)):
            raise NumericalFailure(f"non-finite pre-activation in layer {i}", where=i)
        tape.pre_activations.append(z)
        h = z if i == last else _activate(z, params.activation)
    return (h[0] if single else h), tape


def field_vjp(params, tape, cotangent):
    """Pull ``cotangent`` back through the network recorded in ``tape``.

    Returns ``(grad_x, grad_params)``: grad_x has the shape of the recorded
    input, grad_params is the flattened gradient of ``sum <cotangent, v>``
    over the batch, in ``params.flatten()`` order.
    """
    if tape.n_layers != len(params.weights):
        raise ContractViolation(f"tape has {tape.n_layers} layers, params have {len(params.weights)}")
    cot = np.asarray(cotangent, dtype=np.float64)
    cb = cot[None, :] if cot.ndim == 1 else cot
    batch = tape.inputs[0].shape[0]
    if cb.shape != (batch, params.dim):
        raise ContractViolation(f"cotangent shape {cot.shape} does not match tape batch ({batch}, {params.dim})")
    for i, w in enumerate(params.weights):
        if tape.inputs[i].shape[1] != w.shape[1]:
            raise ContractViolation(f"tape layer {i} width does not match params")

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    delta = cb
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last and params.activation == "tanh":
            a = np.tanh(tape.pre_activations[i])
            delta = delta * (1.0 - a * a)
        grads_w[i] = delta.T @ tape.inputs[i]
        grads_b[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    grad_x = delta[:, : params.dim]
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    grad_params = np.concatenate(parts)
    return (grad_x[0] if tape.single else grad_x), grad_params


def field_jvp(params, x, t, tangent):
    """Forward-mode product ``(dv/dx) @ tangent`` at a single point."""
    xb, tb, _ = _batch(params, x, t)
    h = np.concatenate([xb, time_features(tb, params.time_features)], axis=1)
    dh = np.zeros_like(h)
    dh[:, : params.dim] = np.asarray(tangent, dtype=np.float64).reshape(xb.shape)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        dz = dh @ w.T
        if i == last:
            h, dh = z, dz
        elif params.activation == "tanh":
            h = np.tanh(z)
            dh = dz * (1.0 - h * h)
        else:
            h, dh = z, dz
    return dh[0] if np.asarray(x).ndim == 1 else dh


def field_jacobian(params, x, t):
    """Dense ``dv/dx`` (d x d); row k is the VJP with cotangent e_k."""
    d = params.dim
    if d > MAX_JACOBIAN_DIM:
        raise CapabilityError(
            f"dense Jacobian limited to d <= {MAX_JACOBIAN_DIM} (d={d}); use field_vjp instead"
        )
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise ContractViolation(f"x has shape {x.shape}, expected ({d},)")
    _, tape = field_forward(params, np.broadcast_to(x, (d, d)), float(t))
    grad_x, _ = field_vjp(params, tape, np.eye(d))
    return grad_x


def lipschitz_upper_bound(params):
    """Product of spectral norms of the x-blocks; bounds ||dv/dx|| everywhere.

    Valid because tanh' <= 1; the time-feature columns of the first layer do
    not act on x and are excluded.
    """
    bound = 1.0
    for i, w in enumerate(params.weights):
        block = w[:, : params.dim] if i == 0 else w
        if not np.any(block):
            return 0.0
        bound *= spectral_norm(block)
    return bound


_ACT_CODES = {"identity": 0, "tanh": 1}


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def checkpoint_bytes(params):
    """Little-endian record: magic ``PFLW``, u32 version, u32 layer count,
    u32 layer dims, u32 time features, u32 activation code, then per layer the
    row-major f8 weights followed by the f8 biases."""
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(params.layer_dims))]
    out.append(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
    out.append(struct.pack("<II", params.time_features, _ACT_CODES[params.activation]))
    for w, b in zip(params.weights, params.biases):
        out.append(w.astype("<f8").tobytes())
        out.append(b.astype("<f8").tobytes())
    return b"".join(out)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def checkpoint_from_bytes(blob):
    try:
        return _parse_checkpoint(blob)
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, ContractViolation):
            raise
        raise ContractViolation(f"truncated or corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(blob):
    if blob[:4] != MAGIC:
        raise ContractViolation("not a PFLW checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    (n_dims,) = struct.unpack_from("<I", blob, 8)
    dims = list(struct.unpack_from(f"<{n_dims}I", blob, 12))
    pos = 12 + 4 * n_dims
    n_freq, act_code = struct.unpack_from("<II", blob, pos)
    pos += 8
    activation = {v: k for k, v in _ACT_CODES.items()}[act_code]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=pos)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(blob):
        raise ContractViolation(f"checkpoint has {len(blob) - pos} trailing bytes")
    return VelocityFieldParams(dims, weights, biases, n_freq, activation)


def random_params(d, seed=0, hidden=(16, 16), scale=1.0, activation="tanh"):
    """Small randomly initialised net with non-zero biases, for tests and demos."""
    rng = Rng(seed)
    p = init_params(d, rng, hidden=hidden, activation=activation)
    weights = [scale * w for w in p.weights]
    biases = [0.1 * rng.normal(len(b)) for b in p.biases]
    return VelocityFieldParams(p.layer_dims, weights, biases, p.time_features, p.activation)
