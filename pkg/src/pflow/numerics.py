"""Dense linear algebra and seeded randomness.

Vectors and matrices are plain float64 numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration with a round-robin pair schedule so that each
round rotates n/2 disjoint column pairs at once.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation, NumericalFailure, SingularMatrixError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
MAX_SVD_DIM = 512


def as_vector(x, name="x"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation(f"{name} has non-finite entries")
    return v


def as_matrix(m, name="m"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ContractViolation(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} has non-finite entries")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _round_robin(n):
    """Yield rounds of disjoint (p, q) index pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        pairs = []
        for k in range(m // 2):
            p, q = players[k], players[m - 1 - k]
            if p >= 0 and q >= 0:
                pairs.append((min(p, q), max(p, q)))
        yield pairs
        players = [players[0], players[-1]] + players[1:-1]


def _complete_basis(u, filled):
    """Replace columns of ``u`` not in ``filled`` with an orthonormal completion."""
    m, n = u.shape
    basis = [u[:, j] for j in range(n) if filled[j]]
    candidates = iter(np.eye(m))
    for j in range(n):
        if filled[j]:
            continue
        for e in candidates:
            w = e.copy()
            for b in basis:
                w -= (b @ w) * b
            for b in basis:  # second pass for orthogonality at rounding level
                w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                u[:, j] = w / norm
                basis.append(u[:, j])
                break
    return u


def svd(m):
    """Thin singular value decomposition ``m = U diag(s) V^T``.

    Returns ``(s, U, V)`` with ``s`` sorted in descending order.
    Raises NumericalFailure if the Jacobi sweeps do not converge.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows > MAX_SVD_DIM or cols > MAX_SVD_DIM:
        raise ContractViolation(f"svd limited to {MAX_SVD_DIM}x{MAX_SVD_DIM}, got {a.shape}")
    if rows < cols:
        s, u, v = svd(a.T)
        return s, v, u

    work = a.copy()
    n = cols
    v = np.eye(n)
    schedule = list(_round_robin(n))
    converged = n == 1
    sweeps = 0
    while not converged:
        if sweeps >= JACOBI_MAX_SWEEPS:
            off = _off_diagonal_mass(work)
            raise NumericalFailure(
                f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps", residual=off
            )
        sweeps += 1
        converged = True
        for pairs in schedule:
            p = np.array([pq[0] for pq in pairs])
            q = np.array([pq[1] for pq in pairs])
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = np.abs(gamma) > JACOBI_TOL * scale
            if not np.any(active):
                continue
            converged = False
            p, q = p[active], q[active]
            ap, aq = ap[:, active], aq[:, active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros((rows, n))
    tiny = sigma[0] * 1e-300 if sigma[0] > 0 else 0.0
    filled = sigma > max(tiny, 1e-300)
    u[:, filled] = work[:, filled] / sigma[filled]
    if not np.all(filled):
        u = _complete_basis(u, filled)
    return sigma, u, v


def _off_diagonal_mass(work):
    g = work.T @ work
    return float(np.linalg.norm(g - np.diag(np.diag(g))))


def singular_values(m):
    return svd(m)[0]


def spectral_norm(m):
    return float(singular_values(m)[0])


def condition_number(m):
    """Ratio of largest to smallest singular value of a square matrix."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"condition_number needs a square matrix, got {a.shape}")
    s = singular_values(a)
    if s[-1] < 1e-300:
        raise SingularMatrixError(f"matrix is singular (smallest singular value {s[-1]:.3e})")
    return float(s[0] / s[-1])


class Rng:
    """Seeded stream: Philox counter-based uniforms, Box-Muller normals.

    ``spawn(key)`` derives an independent child stream; the derivation is a
    pure function of (seed, key) so parallel workers reproduce exactly.
    """

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._key = (seed,)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self._key)))

    @classmethod
    def _from_key(cls, key):
        obj = cls.__new__(cls)
        obj.seed = key[0]
        obj._key = key
        obj._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
        return obj

    def spawn(self, key):
        return Rng._from_key(self._key + (int(key),))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size):
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape))
        half = (count + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * half)
        z[0::2] = radius * np.cos(2.0 * math.pi * u2)
        z[1::2] = radius * np.sin(2.0 * math.pi * u2)
        return z[:count].reshape(shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)


def sample_standard_normal(rng, d):
    if d < 1:
        raise ContractViolation(f"dimension must be >= 1, got {d}")
    return rng.normal(d)
