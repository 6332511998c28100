"""Objectives for adversarially robust generator fine-tuning.

Functions taking a latent ``z`` accept a single vector (k,) with its target
(m,) or a batch (N, k) with targets (N, m); batched values and gradients are
sums over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import operator_norm, svd
from .network import forward, jacobian_batch, param_gradients
from .trustregion import solve_inner_max

__all__ = [
    "LossBreakdown",
    "fitting_loss",
    "sensed_residuals",
    "sensed_jacobians",
    "exact_adv_risk",
    "surrogate_bound",
    "surrogate_training_loss",
    "lipschitz_penalty",
    "nullspace_penalty",
    "layer_penalties",
]

DEGENERATE_GAP = 1e-8


@dataclass(frozen=True)
class LossBreakdown:
    fitting: float
    adversarial: float
    lipschitz_penalty: float
    nullspace_penalty: float
    total: float

    def as_dict(self) -> dict:
        return {
            "fitting": self.fitting,
            "adversarial": self.adversarial,
            "lipschitz_penalty": self.lipschitz_penalty,
            "nullspace_penalty": self.nullspace_penalty,
            "total": self.total,
        }


def _pair(net, phi, z, y):
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape[-1] != net.input_dim or y.shape[-1] != phi.m or z.ndim != y.ndim:
        raise ValueError(
            f"latent shape {z.shape} / target shape {y.shape} do not fit a "
            f"{net.input_dim}-input net sensed at {phi.m} coordinates"
        )
    if z.ndim == 2 and z.shape[0] != y.shape[0]:
        raise ValueError("latent and target batches differ in length")
    if net.output_dim != phi.n:
        raise ValueError(f"net outputs {net.output_dim} values but Phi expects {phi.n}")
    return z, y


def sensed_residuals(net, phi, z, y) -> np.ndarray:
    """``y - Phi G(z)``, evaluating only the sensed output units."""
    z, y = _pair(net, phi, z, y)
    return y - forward(net, z, rows=phi.selected).output


def sensed_jacobians(net, phi, z) -> np.ndarray:
    """``Phi J(z)`` for a batch, shape (N, m, k)."""
    return jacobian_batch(net, np.atleast_2d(z), rows=phi.selected)


def fitting_loss(net, phi, z, y):
    """``||y - Phi G(z)||^2`` and its parameter gradients.

    Returns:
        ``(value, grads)`` with ``grads`` as from ``network.param_gradients``.
    """
    z, y = _pair(net, phi, z, y)
    trace = forward(net, z)
    resid = y - phi.apply(trace.output)
    upstream = phi.scatter(-2.0 * resid)
    return float(np.sum(resid**2)), param_gradients(net, trace, upstream)


def exact_adv_risk(net, phi, z, y, eps: float) -> float:
    """Worst-case sensed residual over the eps-ball under the linearized generator."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    z, y = _pair(net, phi, z, y)
    zb, yb = np.atleast_2d(z), np.atleast_2d(y)
    resid = sensed_residuals(net, phi, zb, yb)
    jacs = sensed_jacobians(net, phi, zb)
    return float(sum(solve_inner_max(jacs[i], resid[i], eps).value for i in range(zb.shape[0])))


def surrogate_bound(net, phi, z, y, eps: float) -> float:
    """``2 ||y_hat||^2 + 2 ||P||_op^2 eps^2`` summed over the batch."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    z, y = _pair(net, phi, z, y)
    zb, yb = np.atleast_2d(z), np.atleast_2d(y)
    resid = sensed_residuals(net, phi, zb, yb)
    jacs = sensed_jacobians(net, phi, zb)
    total = 0.0
    for i in range(zb.shape[0]):
        sigma, _, _ = operator_norm(jacs[i])
        total += 2.0 * float(resid[i] @ resid[i]) + 2.0 * sigma**2 * eps**2
    return total


def lipschitz_penalty(w):
    """``||I - W^T W||_F^2`` and its gradient ``-4 W (I - W^T W)``."""
    w = np.asarray(w, dtype=float)
    gap = np.eye(w.shape[1]) - w.T @ w
    return float(np.sum(gap**2)), -4.0 * w @ gap


def nullspace_penalty(phi, w_last):
    """``||Phi W||_op^2`` for the last layer and its gradient.

    The gradient ``2 s_1 Phi^T u_1 v_1^T`` is only defined when the top
    singular value is simple; when the top two are within 1e-8 a zero
    gradient is returned and the step for this term is skipped.
    """
    w_last = np.asarray(w_last, dtype=float)
    dec = svd(phi.compose(w_last))
    s = dec.singulars
    value = float(s[0] ** 2)
    grad = np.zeros_like(w_last)
    if s.size > 1 and s[0] - s[1] <= DEGENERATE_GAP:
        return value, grad
    grad[phi.selected, :] = 2.0 * s[0] * np.outer(dec.u[:, 0], dec.v[:, 0])
    return value, grad


def layer_penalties(net, phi):
    """Lipschitz penalty summed over hidden layers plus the last-layer null-space penalty.

    Returns:
        ``(lip_value, null_value, lip_grads, null_grad)`` where ``lip_grads`` has
        one entry per layer (``None`` for the last layer).
    """
    lip_value = 0.0
    lip_grads = []
    for layer in net.layers[:-1]:
        v, g = lipschitz_penalty(layer.w)
        lip_value += v
        lip_grads.append(g)
    lip_grads.append(None)
    null_value, null_grad = nullspace_penalty(phi, net.layers[-1].w)
    return lip_value, null_value, lip_grads, null_grad


def surrogate_training_loss(
    net,
    phi,
    z,
    y,
    eps: float,
    lam: float,
    lipschitz_weight=None,
    nullspace_weight=None,
    with_adversarial: bool = True,
):
    """Upper-bound training objective summed over a batch.

    The reported value is ``sum_i eps^2 ||Phi J(z_i)||_op^2 + (lam + 1)/2 ||y_i - Phi G(z_i)||^2``.
    The Jacobian norm term is not differentiated end to end; its gradient is
    replaced by the layer-wise proxies, so the returned gradients are those of

        sum_i [(lam + 1)/2 ||y_i - Phi G(z_i)||^2
               + lipschitz_weight * sum_{l<H} ||I - W_l^T W_l||_F^2
               + nullspace_weight * ||Phi W_H||_op^2]

    with both weights defaulting to ``eps^2``. ``with_adversarial=False`` skips
    the per-sample operator norms (the value then omits that term), which is
    what training loops use.

    Returns:
        ``(value, grads, breakdown)``; ``breakdown.total`` equals ``value``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    z, y = _pair(net, phi, z, y)
    zb, yb = np.atleast_2d(z), np.atleast_2d(y)
    count = zb.shape[0]
    if count == 0:
        raise ValueError("empty batch")
    lw = eps**2 if lipschitz_weight is None else float(lipschitz_weight)
    nw = eps**2 if nullspace_weight is None else float(nullspace_weight)

    fit, fit_grads = fitting_loss(net, phi, zb, yb)
    half = 0.5 * (lam + 1.0)
    adv = 0.0
    if eps > 0 and with_adversarial:
        jacs = sensed_jacobians(net, phi, zb)
        adv = float(sum(operator_norm(j)[0] ** 2 for j in jacs)) * eps**2

    lip_value, null_value, lip_grads, null_grad = layer_penalties(net, phi)
    grads = []
    for l, (dw, db) in enumerate(fit_grads):
        dw = half * dw
        if lip_grads[l] is not None:
            dw = dw + count * lw * lip_grads[l]
        if l == len(fit_grads) - 1:
            dw = dw + count * nw * null_grad
        grads.append((dw, half * db))
    value = adv + half * fit
    breakdown = LossBreakdown(fit, adv, lip_value, null_value, value)
    return value, grads, breakdown
