"""Linear degradation operators ``y = H x + noise`` on row-major images."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .numerics import Rng

KINDS = ("identity-denoise", "gaussian-blur", "downsample", "random-mask", "box-mask")
OBS_MAGIC = b"PFOB"
OBS_VERSION = 1


def _reflect(i, n):
    """Mirror index without repeating the edge sample (numpy 'reflect')."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


def blur_matrix_1d(n, kernel_size, sigma):
    r = kernel_size // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    k = np.zeros((n, n))
    for i in range(n):
        for j, w in zip(range(-r, r + 1), taps):
            k[i, _reflect(i + j, n)] += w
    return k


@dataclass(frozen=True)
class LinearOperator:
    """A linear degradation on an ``height x width`` image flattened row-major.

    ``params`` by kind:
      gaussian-blur: kernel_size (odd), sigma_b
      downsample:    factor, or factor_h / factor_w
      random-mask:   ratio (masked fraction), mask_seed
      box-mask:      box_h, box_w, optional top / left (default centred)
    """

    kind: str
    height: int
    width: int
    noise_sigma: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown operator kind {self.kind!r}; valid: {', '.join(KINDS)}")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.kind == "gaussian-blur" and self.params.get("kernel_size", 1) % 2 == 0:
            raise ConfigurationError("blur kernel size must be odd")
        if self.kind == "downsample":
            fh, fw = self._factors
            if self.height % fh or self.width % fw:
                raise ConfigurationError(f"downsample factors {(fh, fw)} do not divide {(self.height, self.width)}")
        _ = self.out_dim  # validates masks

    @property
    def in_dim(self):
        return self.height * self.width

    @property
    def _factors(self):
        f = self.params.get("factor", 1)
        return int(self.params.get("factor_h", f)), int(self.params.get("factor_w", f))

    @cached_property
    def keep_indices(self):
        """Observed pixel indices for mask operators (sorted)."""
        n = self.in_dim
        if self.kind == "random-mask":
            n_masked = int(round(self.params.get("ratio", 0.7) * n))
            order = Rng(int(self.params.get("mask_seed", 0))).permutation(n)
            keep = np.sort(order[n_masked:])
        elif self.kind == "box-mask":
            bh, bw = int(self.params["box_h"]), int(self.params["box_w"])
            top = int(self.params.get("top", (self.height - bh) // 2))
            left = int(self.params.get("left", (self.width - bw) // 2))
            hole = np.zeros((self.height, self.width), dtype=bool)
            hole[top:top + bh, left:left + bw] = True
            keep = np.nonzero(~hole.ravel())[0]
        else:
            raise ContractViolation(f"{self.kind} has no keep set")
        if keep.size == 0:
            raise ConfigurationError("mask removes every pixel")
        return keep

    @cached_property
    def _blur(self):
        k = int(self.params.get("kernel_size", 7))
        s = float(self.params.get("sigma_b", 1.0))
        return blur_matrix_1d(self.height, k, s), blur_matrix_1d(self.width, k, s)

    @property
    def out_dim(self):
        if self.kind in ("random-mask", "box-mask"):
            return int(self.keep_indices.size)
        if self.kind == "downsample":
            fh, fw = self._factors
            return (self.height // fh) * (self.width // fw)
        return self.in_dim

    def apply(self, x):
        return apply(self, x)

    def adjoint(self, r):
        return adjoint(self, r)


def _check(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ContractViolation(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def apply(op, x):
    x = _check(x, op.in_dim, "x")
    if op.kind == "identity-denoise":
        return x.copy()
    if op.kind in ("random-mask", "box-mask"):
        return x[op.keep_indices]
    img = x.reshape(op.height, op.width)
    if op.kind == "gaussian-blur":
        kh, kw = op._blur
        return (kh @ img @ kw.T).ravel()
    fh, fw = op._factors
    return img.reshape(op.height // fh, fh, op.width // fw, fw).mean(axis=(1, 3)).ravel()


def adjoint(op, r):
    r = _check(r, op.out_dim, "r")
    if op.kind == "identity-denoise":
        return r.copy()
    if op.kind in ("random-mask", "box-mask"):
        out = np.zeros(op.in_dim)
        out[op.keep_indices] = r
        return out
    if op.kind == "gaussian-blur":
        kh, kw = op._blur
        return (kh.T @ r.reshape(op.height, op.width) @ kw).ravel()
    fh, fw = op._factors
    low = r.reshape(op.height // fh, op.width // fw) / (fh * fw)
    return np.repeat(np.repeat(low, fh, axis=0), fw, axis=1).ravel()


def naive_inverse(op, y):
    """Image-space view of an observation used as the 'degraded input' baseline.

    Masks are zero-filled, downsampled images are nearest-upsampled, and
    blurred or noisy images are taken as-is.
    """
    if op.kind == "downsample":
        fh, fw = op._factors
        return adjoint(op, y) * (fh * fw)
    return adjoint(op, y)


@dataclass
class Observation:
    y: np.ndarray
    operator: LinearOperator
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        self.y = _check(self.y, self.operator.out_dim, "y")
        if self.ground_truth is not None:
            self.ground_truth = _check(self.ground_truth, self.operator.in_dim, "ground_truth")


def degrade(op, x, rng):
    x = _check(x, op.in_dim, "x")
    y = apply(op, x)
    if op.noise_sigma > 0:
        y = y + op.noise_sigma * rng.normal(op.out_dim)
    return Observation(y, op, x.copy())


TASKS = ("denoise", "blur", "sr", "random-inpaint", "box-inpaint")


def task_preset(name, height=16, width=16):
    """Degradation presets scaled from 256x256 down to a 16x16 grid."""
    presets = {
        "denoise": ("identity-denoise", 0.2, {}),
        # 61x61 kernel with sigma_b = 3.0 at 256 px, scaled by 16/64
        "blur": ("gaussian-blur", 0.05, {"kernel_size": 7, "sigma_b": 0.75}),
        "sr": ("downsample", 0.05, {"factor": 4}),
        "random-inpaint": ("random-mask", 0.01, {"ratio": 0.7, "mask_seed": 0}),
        # 80x80 box on 256x256 covers 9.8% of the area; 5x5 on 16x16 covers 9.8%
        "box-inpaint": ("box-mask", 0.05, {"box_h": 5, "box_w": 5}),
    }
    if name not in presets:
        raise ConfigurationError(f"unknown task {name!r}; valid: {', '.join(TASKS)}")
    kind, sigma, params = presets[name]
    return LinearOperator(kind, height, width, sigma, dict(params))


# ---------------------------------------------------------------- binary records

def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_vec(v):
    v = np.asarray(v, dtype="<f8")
    return struct.pack("<I", v.size) + v.tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, fmt):
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += struct.calcsize(fmt)
        return vals

    def string(self):
        (n,) = self.take("<I")
        s = self.blob[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def vector(self):
        (n,) = self.take("<I")
        v = np.frombuffer(self.blob, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return v


def observation_bytes(obs, extras=None):
    """Serialise an observation; ``extras`` maps labels to appended vectors (e.g. restorations).

    Little-endian: magic ``PFOB``, u32 version, u32 height, u32 width, kind
    string, f8 noise sigma, JSON params string, y vector, u8 ground-truth flag
    (+ vector), u32 extras count, then (label string, vector) pairs. Strings
    are u32 length + UTF-8 bytes; vectors are u32 length + f8 values.
    """
    op = obs.operator
    parts = [
        OBS_MAGIC,
        struct.pack("<III", OBS_VERSION, op.height, op.width),
        _pack_str(op.kind),
        struct.pack("<d", op.noise_sigma),
        _pack_str(json.dumps(op.params, sort_keys=True)),
        _pack_vec(obs.y),
        struct.pack("<B", obs.ground_truth is not None),
    ]
    if obs.ground_truth is not None:
        parts.append(_pack_vec(obs.ground_truth))
    extras = extras or {}
    parts.append(struct.pack("<I", len(extras)))
    for label, vec in extras.items():
        parts.append(_pack_str(label))
        parts.append(_pack_vec(vec))
    return b"".join(parts)


def observation_from_bytes(blob):
    """Inverse of :func:`observation_bytes`; returns ``(observation, extras)``."""
    if blob[:4] != OBS_MAGIC:
        raise ContractViolation("not an observation record (bad magic)")
    rd = _Reader(blob)
    rd.pos = 4
    version, h, w = rd.take("<III")
    if version != OBS_VERSION:
        raise ContractViolation(f"unsupported observation version {version}")
    kind = rd.string()
    (sigma,) = rd.take("<d")
    params = json.loads(rd.string())
    y = rd.vector()
    (has_gt,) = rd.take("<B")
    gt = rd.vector() if has_gt else None
    (n_extra,) = rd.take("<I")
    extras = {}
    for _ in range(n_extra):
        label = rd.string()
        extras[label] = rd.vector()
    op = LinearOperator(kind, h, w, sigma, params)
    return Observation(y, op, gt), extras


def write_observation(path, obs, extras=None):
    with open(path, "wb") as fh:
        fh.write(observation_bytes(obs, extras))


def read_observation(path):
    with open(path, "rb") as fh:
        return observation_from_bytes(fh.read())

