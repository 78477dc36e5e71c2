"""Image-quality metrics for images normalised to [-1, 1] (data range 2)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation

DATA_RANGE = 2.0
PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """``10 log10(range^2 / MSE)``; identical inputs return +inf (reports cap at 100 dB)."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / err)


def capped_psnr(value):
    return min(value, PSNR_CAP)


def _as_square(img):
    if img.ndim == 2:
        return img
    side = math.isqrt(img.size)
    if side * side != img.size:
        raise ContractViolation(f"cannot view a vector of length {img.size} as a square image")
    return img.reshape(side, side)


def _windows(img, w):
    return np.lib.stride_tricks.sliding_window_view(img, (w, w))


def ssim_components(a, b, window=7):
    """Per-window luminance and contrast-structure maps of SSIM.

    Uniform ``window x window`` windows over all valid positions, population
    statistics, stabilisers ``(0.01 R)^2`` and ``(0.03 R)^2`` with R = 2.
    """
    a, b = _pair(a, b)
    a, b = _as_square(a), _as_square(b)
    if window % 2 == 0 or window < 1:
        raise ConfigurationError(f"window must be odd and positive, got {window}")
    if min(a.shape) < window:
        raise ConfigurationError(f"image {a.shape} smaller than window {window}")
    c1 = (0.01 * DATA_RANGE) ** 2
    c2 = (0.03 * DATA_RANGE) ** 2
    wa, wb = _windows(a, window), _windows(b, window)
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(2, 3))
    var_b = (db * db).mean(axis=(2, 3))
    cov = (da * db).mean(axis=(2, 3))
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, window=7):
    lum, cs = ssim_components(a, b, window)
    return float(np.mean(lum * cs))


@dataclass
class MetricReport:
    mse: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, restored, truth, window=7):
        self.mse.append(mse(restored, truth))
        self.psnr.append(psnr(restored, truth))
        self.ssim.append(ssim(restored, truth, window))

    def summary(self):
        out = {}
        for name in ("mse", "psnr", "ssim"):
            vals = np.array(getattr(self, name), dtype=np.float64)
            if name == "psnr":
                vals = np.minimum(vals, PSNR_CAP)
            out[f"{name}_mean"] = float(vals.mean()) if vals.size else math.nan
            out[f"{name}_std"] = float(vals.std()) if vals.size else math.nan
        return out

    def histogram(self, name, bins=10):
        vals = np.array(getattr(self, name), dtype=np.float64)
        if name == "psnr":
            vals = np.minimum(vals, PSNR_CAP)
        counts, edges = np.histogram(vals, bins=bins)
        return counts, edges
