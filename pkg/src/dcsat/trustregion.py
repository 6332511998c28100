"""Exact solver for the latent-space inner maximization.

Under the first-order model ``G(z + dz) ~ G(z) + J dz`` the worst-case sensed
residual is

    max_{||dz|| <= eps}  ||y_hat - P dz||^2,     P = Phi J,  y_hat = y - Phi G(z).

The written expansion in some references carries a minus sign in front of
``J dz``; since the feasible ball is symmetric the optimal value is the same
either way, and this module uses the plus-sign convention throughout.

The problem is a trust-region subproblem with a concave (negated) objective,
so the maximizer sits on the sphere. With ``P = U diag(s) V^T``,
``c = U^T y_hat`` and ``lam_i = s_i^2`` the optimality conditions

    (mu I - P^T P) dz = -P^T y_hat,   mu I - P^T P >= 0,   mu (eps - ||dz||) = 0

give ``dz = -V diag(s_i / (mu - lam_i)) c`` with ``mu > max(lam)`` chosen so
that ``sum_i lam_i c_i^2 / (mu - lam_i)^2 = eps^2``. When ``c`` vanishes on
the top singular block and that sum stays below ``eps^2`` as ``mu`` drops to
``max(lam)`` (the "hard case") the limit point is padded with the top right
singular vector.

The root is found in the shifted variable ``t = mu - max(lam)`` with the
gaps ``max(lam) - lam_i`` precomputed, which keeps ``mu - lam_i`` free of
cancellation when the root sits next to the pole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import svd

__all__ = [
    "HardCase",
    "SecularFailure",
    "TrustRegionSolution",
    "KKTReport",
    "solve_inner_max",
    "secular_root",
    "verify_kkt",
    "closed_form_value",
    "oracle_inner_max",
]

HARD_CASE_RTOL = 1e-10
CLUSTER_RTOL = 1e-10
SECULAR_RTOL = 1e-12
MAX_SECULAR_ITER = 500
# below this radius eps^2 is no longer a normal double
MIN_EPS = 1e-150


class HardCase(ArithmeticError):
    """The secular equation has no root above the top pole."""


class SecularFailure(RuntimeError):
    """Root finding for the secular equation did not converge."""


@dataclass(frozen=True)
class TrustRegionSolution:
    delta_z: np.ndarray
    mu: float
    value: float
    kkt_stationarity: float
    kkt_norm_gap: float
    hard_case: bool


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    min_eig: float
    psd_violation: float
    complementarity: float
    feasibility: float

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.psd_violation, self.complementarity, self.feasibility)

    def ok(self, tol: float = 1e-8) -> bool:
        return self.max_residual <= tol


def _cluster(lams: np.ndarray, coeffs: np.ndarray):
    """Merge near-equal eigenvalues; returns (group lams, group squared coeffs, labels)."""
    scale = max(float(lams[0]), 1e-300)
    labels = np.zeros(lams.size, dtype=int)
    start = 0
    for i in range(1, lams.size):
        if lams[start] - lams[i] > CLUSTER_RTOL * scale:
            start = i
            labels[i] = labels[i - 1] + 1
        else:
            labels[i] = labels[i - 1]
    n_groups = labels[-1] + 1
    group_lam = np.array([lams[labels == j].mean() for j in range(n_groups)])
    group_c2 = np.array([np.sum(coeffs[labels == j] ** 2) for j in range(n_groups)])
    return group_lam, group_c2, labels


def _phi(t, gaps, weights, eps2):
    return float(np.sum(weights / (t + gaps) ** 2)) - eps2


def _solve_shifted(gaps, weights, eps2, lam_max):
    """Root ``t > 0`` of ``sum w_i / (t + g_i)^2 = eps^2`` (strictly decreasing in t)."""
    # divide through by eps^2 so the secular sum stays O(1) even for tiny radii
    weights = weights / eps2
    eps2 = 1.0
    tol = SECULAR_RTOL
    delta = 1e-12 * (1.0 + lam_max)

    # bracket [lo, hi] with phi(lo) > 0 > phi(hi)
    lo, hi = 0.0, delta
    while _phi(hi, gaps, weights, eps2) > 0:
        lo = hi
        hi *= 2.0
        if not np.isfinite(hi):
            raise SecularFailure(f"no sign change found, last bracket [{lo!r}, {hi!r}]")
    if lo == 0.0 and gaps[0] > 0 and _phi(0.0, gaps, weights, eps2) <= 0:
        raise HardCase("secular sum at the top pole is already below eps^2")

    # Newton on psi(t) = 1/sqrt(S(t)) - 1/eps, which is nearly linear in t
    t = hi
    for _ in range(MAX_SECULAR_ITER):
        d = t + gaps
        s_val = float(np.sum(weights / d**2))
        f = s_val - eps2
        if abs(f) <= tol:
            return t
        if f > 0:
            lo = t
        else:
            hi = t
        ds = -2.0 * float(np.sum(weights / d**2 / d))
        psi = 1.0 / np.sqrt(s_val) - 1.0 / np.sqrt(eps2)
        dpsi = -0.5 * ds / s_val**1.5
        t_new = t - psi / dpsi if dpsi > 0 else np.nan
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        if t_new == t or hi - lo <= 4 * np.spacing(hi):
            # floating point resolution of t exhausted
            return t
        t = t_new
    raise SecularFailure(
        f"secular equation did not converge in {MAX_SECULAR_ITER} steps; "
        f"bracket mu - lam_max in [{lo!r}, {hi!r}]"
    )


def _check_eps(eps):
    if eps <= 0:
        raise ValueError("eps must be positive")
    if eps < MIN_EPS:
        raise ValueError(f"eps={eps!r} is below the resolvable radius {MIN_EPS}")


def secular_root(lambdas, coeffs, eps: float) -> float:
    """Multiplier ``mu > max(lambdas)`` with ``sum lam_i c_i^2 / (mu - lam_i)^2 = eps^2``.

    Raises:
        HardCase: when the equation has no root above ``max(lambdas)``.
    """
    _check_eps(eps)
    lams = np.asarray(lambdas, dtype=float)
    c = np.asarray(coeffs, dtype=float)
    if lams.shape != c.shape or lams.ndim != 1 or lams.size == 0:
        raise ValueError("lambdas and coeffs must be 1-D of equal length")
    if np.any(np.diff(lams) > 0):
        raise ValueError("lambdas must be nonincreasing")
    lam_max = float(lams[0])
    weights = lams * c**2
    if not np.any(weights > 0):
        raise HardCase("every lam_i c_i vanishes")
    group_lam, group_c2, _ = _cluster(lams, c)
    gaps = lam_max - group_lam
    gaps[0] = 0.0
    w = group_lam * group_c2
    keep = w > 0
    if not keep[0] and _phi(0.0, gaps[keep], w[keep], eps**2) <= 0:
        raise HardCase("top coefficient vanishes and the secular sum stays below eps^2")
    t = _solve_shifted(gaps[keep], w[keep], eps**2, lam_max)
    return lam_max + t


def solve_inner_max(p, y_hat, eps: float) -> TrustRegionSolution:
    """Maximize ``||y_hat - P dz||^2`` over ``||dz|| <= eps``."""
    _check_eps(eps)
    p = np.asarray(p, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if p.ndim != 2 or y_hat.shape != (p.shape[0],):
        raise ValueError(f"shape mismatch: P is {p.shape}, y_hat is {y_hat.shape}")
    k = p.shape[1]
    ynorm2 = float(y_hat @ y_hat)

    dec = svd(p)
    s = dec.singulars
    if s[0] == 0.0:
        return TrustRegionSolution(np.zeros(k), 0.0, ynorm2, 0.0, 0.0, False)

    lams = s**2
    lam_max = float(lams[0])
    c = dec.u.T @ y_hat
    ynorm = np.sqrt(ynorm2)
    group_lam, group_c2, labels = _cluster(lams, c)
    gaps_g = lam_max - group_lam
    gaps_g[0] = 0.0
    gaps = gaps_g[labels]
    eps2 = eps * eps

    top = labels == 0
    top_zero = np.all(np.abs(c[top]) <= HARD_CASE_RTOL * ynorm)
    hard = False
    if top_zero:
        rest = ~top
        lim = float(np.sum(lams[rest] * c[rest] ** 2 / gaps[rest] ** 2)) if rest.any() else 0.0
        hard = lim < eps2
    if hard:
        coef = np.zeros_like(s)
        rest = ~top
        coef[rest] = s[rest] * c[rest] / gaps[rest]
        dz = -dec.v @ coef
        pad2 = eps2 - float(dz @ dz)
        dz = dz + np.sqrt(max(pad2, 0.0)) * dec.v[:, 0]
        mu = lam_max
    else:
        w = group_lam * group_c2
        if top_zero:
            w[0] = 0.0
        keep = w > 0
        t = _solve_shifted(gaps_g[keep], w[keep], eps2, lam_max)
        mu = lam_max + t
        coef = s * c / (t + gaps)
        if top_zero:
            coef[top] = 0.0
        dz = -dec.v @ coef

    resid = y_hat - p @ dz
    value = float(resid @ resid)
    stat = float(np.linalg.norm(mu * dz - p.T @ (p @ dz) + p.T @ y_hat))
    gap = abs(float(np.linalg.norm(dz)) - eps) if mu > 0 else 0.0
    return TrustRegionSolution(dz, float(mu), value, stat, gap, bool(hard))


def verify_kkt(p, y_hat, eps: float, sol: TrustRegionSolution) -> KKTReport:
    """Residuals of the optimality system for a claimed maximizer."""
    p = np.asarray(p, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    dz = np.asarray(sol.delta_z, dtype=float)
    mu = float(sol.mu)
    ptp = p.T @ p
    stat = float(np.linalg.norm(mu * dz - ptp @ dz + p.T @ y_hat))
    min_eig = float(np.linalg.eigvalsh(mu * np.eye(ptp.shape[0]) - ptp)[0])
    # eigenvalues of mu I - P^T P are only resolved to rounding of ||P^T P||
    floor = 64 * np.finfo(float).eps * max(1.0, mu)
    psd_violation = max(0.0, -min_eig - floor)
    norm = float(np.linalg.norm(dz))
    comp = abs(mu * (eps - norm))
    feas = max(0.0, norm - eps)
    return KKTReport(stat, min_eig, psd_violation, comp, feas)


def closed_form_value(p, y_hat, mu: float) -> float:
    """Objective at the optimum from the multiplier alone.

    ``sum_i c_i^2 mu^2 / (mu - lam_i)^2`` plus the part of ``y_hat`` outside
    the range of ``P``, which the perturbation cannot touch.
    """
    p = np.asarray(p, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    dec = svd(p)
    lams = dec.singulars**2
    if mu <= lams[0]:
        raise ValueError(f"mu={mu!r} must exceed the top eigenvalue {lams[0]!r}")
    c = dec.u.T @ y_hat
    outside = max(float(y_hat @ y_hat) - float(c @ c), 0.0)
    return float(np.sum(c**2 * (mu / (mu - lams)) ** 2)) + outside


def oracle_inner_max(
    p,
    y_hat,
    eps: float,
    restarts: int = 64,
    seed: int = 0,
    step: float = 1e-2,
    max_iter: int = 100_000,
    tol: float = 1e-14,
) -> float:
    """Brute-force reference: projected gradient ascent from random sphere points.

    All restarts advance together; iteration stops once no iterate moves by
    more than ``tol * eps``.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    p = np.asarray(p, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    k = p.shape[1]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((restarts, k))
    x *= eps / np.linalg.norm(x, axis=1, keepdims=True)
    ptp = p.T @ p
    pty = p.T @ y_hat
    for _ in range(max_iter):
        grad = 2.0 * (x @ ptp - pty)
        x_new = x + step * grad
        norms = np.linalg.norm(x_new, axis=1, keepdims=True)
        x_new = np.where(norms > eps, x_new * (eps / np.maximum(norms, 1e-300)), x_new)
        moved = np.max(np.abs(x_new - x))
        x = x_new
        if moved <= tol * eps:
            break
    resid = y_hat[None, :] - x @ p.T
    best = float(np.max(np.sum(resid**2, axis=1)))
    return max(best, float(y_hat @ y_hat))
