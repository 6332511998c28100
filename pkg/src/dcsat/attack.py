"""Empirical latent-space attack and test-set evaluation.

The attack queries many random directions around a latent code, all scaled
to the full radius ``eps``, runs the true (non-linearized) generator on each,
and keeps the largest sensed residual. Radius ``eps`` is exact for the
linearized model, whose objective is convex along every ray; for the real
net it is a heuristic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import sensed_jacobians, sensed_residuals
from .network import forward
from .trustregion import solve_inner_max

__all__ = ["AttackResult", "Evaluation", "omni_attack", "evaluate_model", "sample_seed"]

DEFAULT_QUERIES = 4096
_CHUNK = 2048


@dataclass(frozen=True)
class AttackResult:
    best_delta_z: np.ndarray
    risk: float
    queries: int
    linearized_value: float
    unperturbed: float


@dataclass(frozen=True)
class Evaluation:
    adv_risk: float
    fit_loss: float
    total: float
    per_sample: list


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def omni_attack(
    net, phi, z, y, eps: float, n_queries: int = DEFAULT_QUERIES, seed=0, linearized: bool = True
) -> AttackResult:
    """Best of ``n_queries`` random directions of norm ``eps`` around ``z``.

    Directions are normalized standard normals drawn from one stream, so a
    longer query run always contains a shorter one with the same seed as a
    prefix. The unperturbed residual is a floor for the returned risk; ties
    go to the lowest query index.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    base = float(np.sum(sensed_residuals(net, phi, z, y) ** 2))
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_queries, z.shape[0]))
    dirs *= eps / np.linalg.norm(dirs, axis=1, keepdims=True)

    best_idx, best_risk = 0, -np.inf
    for start in range(0, n_queries, _CHUNK):
        chunk = dirs[start : start + _CHUNK]
        out = forward(net, z[None, :] + chunk, rows=phi.selected).output
        risks = np.sum((y[None, :] - out) ** 2, axis=1)
        j = int(np.argmax(risks))
        if risks[j] > best_risk:
            best_idx, best_risk = start + j, float(risks[j])

    lin = float("nan")
    if linearized:
        if eps > 0:
            p = sensed_jacobians(net, phi, z)[0]
            resid = sensed_residuals(net, phi, z, y)
            lin = solve_inner_max(p, resid, eps).value
        else:
            lin = base
    return AttackResult(
        best_delta_z=dirs[best_idx].copy(),
        risk=max(best_risk, base),
        queries=n_queries,
        linearized_value=lin,
        unperturbed=base,
    )


def evaluate_model(
    net, phi, z, y, eps: float, n_queries: int = DEFAULT_QUERIES, seed: int = 0, linearized=True
) -> Evaluation:
    """Mean attack risk and mean fitting loss over a test set.

    Sample ``i`` is attacked with the seed stream ``(seed, i)``, so results do
    not depend on evaluation order.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if z.shape[0] == 0:
        raise ValueError("empty test set")
    rows = []
    for i in range(z.shape[0]):
        res = omni_attack(net, phi, z[i], y[i], eps, n_queries, sample_seed(seed, i), linearized)
        rows.append(
            {
                "index": i,
                "attack_risk": res.risk,
                "fit_loss": res.unperturbed,
                "linearized_value": res.linearized_value,
            }
        )
    adv = float(np.mean([r["attack_risk"] for r in rows]))
    fit = float(np.mean([r["fit_loss"] for r in rows]))
    return Evaluation(adv_risk=adv, fit_loss=fit, total=adv + fit, per_sample=rows)
