"""Small dense linear-algebra kernel: thin SVD, operator norm, symmetric eigmax.

Matrices handled here are small (at most a few hundred rows by ~100 columns),
so the SVD is delegated to LAPACK through numpy and wrapped with a fixed sign
convention. The operator norm is computed by seeded power iteration so that it
also hands back the top singular pair for gradient formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinAlgFailure",
    "SvdResult",
    "svd",
    "operator_norm",
    "eigmax_sym",
]

POWER_ITER_CAP = 10_000
POWER_ITER_SEED = 0x5EED


class LinAlgFailure(RuntimeError):
    """Raised when a factorization does not converge or an input is invalid."""


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singulars: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singulars) @ self.v.T


def _as_finite_matrix(a, name="a") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def svd(a) -> SvdResult:
    """Thin SVD ``a = U diag(s) V^T`` with a deterministic sign convention.

    The first entry of each right singular vector whose magnitude exceeds
    1e-12 is made nonnegative, flipping the paired left vector along with it.
    """
    a = _as_finite_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise LinAlgFailure(
            f"SVD did not converge for a {a.shape[0]}x{a.shape[1]} matrix"
        ) from exc
    v = vt.T.copy()
    for j in range(v.shape[1]):
        nz = np.flatnonzero(np.abs(v[:, j]) > 1e-12)
        if nz.size and v[nz[0], j] < 0:
            v[:, j] = -v[:, j]
            u[:, j] = -u[:, j]
    return SvdResult(u=u, singulars=s, v=v)


def operator_norm(a, tol: float = 1e-12, max_iter: int = POWER_ITER_CAP, seed: int = POWER_ITER_SEED):
    """Largest singular value of ``a`` by power iteration on ``a^T a``.

    Args:
        a: matrix of shape (m, k).
        tol: relative tolerance on the eigen-residual of ``a^T a``.
        max_iter: iteration cap.
        seed: seed of the random start vector.

    Returns:
        ``(sigma, u, v)`` with ``a v = sigma u`` for unit vectors ``u`` (length m)
        and ``v`` (length k). A zero matrix gives ``sigma = 0`` and arbitrary
        unit vectors.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = _as_finite_matrix(a)
    m, k = a.shape
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(k)
    v /= np.linalg.norm(v)
    if not np.any(a):
        u = np.zeros(m)
        u[0] = 1.0
        return 0.0, u, v

    sigma2 = 0.0
    for _ in range(max_iter):
        av = a @ v
        w = a.T @ av
        sigma2 = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector landed in the null space
            v = rng.standard_normal(k)
            v /= np.linalg.norm(v)
            continue
        if np.linalg.norm(w - sigma2 * v) <= tol * sigma2:
            v = w / nw
            break
        v = w / nw
    av = a @ v
    sigma = float(np.linalg.norm(av))
    u = av / sigma if sigma > 0 else np.eye(m)[0]
    return sigma, u, v


def eigmax_sym(s) -> float:
    """Largest eigenvalue of a symmetric matrix.

    Raises:
        ValueError: if ``s`` is not square or not symmetric within 1e-10
            (scaled by the largest entry when that exceeds one).
    """
    s = _as_finite_matrix(s, "s")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"s must be square, got {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s))))
    if np.max(np.abs(s - s.T)) > 1e-10 * scale:
        raise ValueError("s is not symmetric")
    return float(np.linalg.eigvalsh(0.5 * (s + s.T))[-1])
