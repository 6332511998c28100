"""Autoencoder pretraining, DCS / DCSAT fine-tuning and the lambda/SR sweep.

Fine-tuning minimizes the per-sample surrogate

    (lam + 1)/2 ||y_i - Phi G(z_i)||^2 + lipschitz_weight * sum_{l<H} ||I - W_l^T W_l||_F^2
                                      + nullspace_weight * ||Phi W_H||_op^2

averaged over the batch. The step is taken on that objective divided by
``(lam + 1)/2``, which has the same minimizers but keeps the learning rate
meaningful across lambdas spanning several decades; the DCS baseline is the
same loop with both penalty weights at zero. ``Phi`` is a fixed index mask
and is never touched by any update.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import DEFAULT_QUERIES, evaluate_model
from .losses import (
    fitting_loss,
    layer_penalties,
    sensed_jacobians,
    sensed_residuals,
    surrogate_training_loss,
)
from .network import GeneratorNet, forward, init_generator, param_gradients
from .sensing import SamplingMatrix, make_sampler
from .trustregion import solve_inner_max

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "AblationRecord",
    "TrainingDiverged",
    "derive_seed",
    "read_config",
    "write_config",
    "train_autoencoder",
    "finetune_dcsat",
    "train_dcs_baseline",
    "mean_exact_risk",
    "calibrate_eps",
    "ablation_sweep",
    "sort_records",
    "surrogate_tightness_check",
    "FAIL_FACTOR",
]

FAIL_FACTOR = 5.0


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named random stream (mask, init, batch, attack...)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class TrainConfig:
    lam: float = 2e4
    eps: float | None = None
    sr: float = 0.8
    seed: int = 0
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 50
    lipschitz_weight: float | None = None
    nullspace_weight: float | None = None
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    early_stop_patience: int = 0
    monitor_samples: int = 200
    n_queries: int = DEFAULT_QUERIES
    target_ratio: float = 1.3

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lam must be finite and nonnegative")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive and epochs nonnegative")

    def penalty_weights(self, eps: float):
        lw = eps**2 if self.lipschitz_weight is None else self.lipschitz_weight
        nw = eps**2 if self.nullspace_weight is None else self.nullspace_weight
        return lw, nw

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_CONFIG_ALIASES = {"lambda": "lam"}


def _coerce(name: str, text: str):
    f = {f.name: f for f in dataclasses.fields(TrainConfig)}[name]
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    kind = str(f.type)
    if "int" in kind and "float" not in kind:
        return int(float(text))
    if "float" in kind:
        return float(text)
    return text


def read_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _CONFIG_ALIASES.get(key, key)
        if key not in {f.name for f in dataclasses.fields(TrainConfig)}:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return (base or TrainConfig()).replace(**values)


def write_config(cfg: TrainConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        key = "lambda" if f.name == "lam" else f.name
        value = getattr(cfg, f.name)
        lines.append(f"{key} = {value if isinstance(value, str) else repr(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainHistory:
    """Per-epoch rows: epoch, split, fitting, adversarial, penalties, total."""

    rows: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.wall_time)

    def final(self, split: str = "train") -> dict:
        picked = [r for r in self.rows if r["split"] == split]
        return picked[-1] if picked else {}

    def to_csv(self) -> str:
        cols = ["epoch", "split", "fitting", "adversarial", "lipschitz_penalty", "nullspace_penalty", "total"]
        out = [",".join(cols)]
        for r in self.rows:
            out.append(",".join(r[c] if c == "split" else repr(r[c]) for c in cols))
        return "\n".join(out) + "\n"


@dataclass
class AblationRecord:
    method: str
    lam: float | None
    sr: float
    adv_risk: float
    fit_loss: float
    total: float
    seed: int = 0
    eps: float = float("nan")
    linearized_risk: float = float("nan")
    failed: bool = False

    CSV_COLUMNS = ("method", "lambda", "sr", "adv_risk", "fit_loss", "total", "seed", "eps", "linearized_risk")

    def csv_row(self) -> str:
        lam = "" if self.lam is None else repr(float(self.lam))
        adv = "fail" if self.failed else repr(self.adv_risk)
        total = "" if self.failed else repr(self.total)
        return ",".join(
            [
                self.method,
                lam,
                repr(self.sr),
                adv,
                repr(self.fit_loss),
                total,
                str(self.seed),
                repr(self.eps),
                repr(self.linearized_risk),
            ]
        )


def records_to_csv(records) -> str:
    return ",".join(AblationRecord.CSV_COLUMNS) + "\n" + "".join(r.csv_row() + "\n" for r in records)


class _SGD:
    def __init__(self, net: GeneratorNet, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]

    def step(self, net: GeneratorNet, grads) -> None:
        for l, (dw, db) in enumerate(grads):
            vw, vb = self.velocity[l]
            if self.momentum:
                vw *= self.momentum
                vb *= self.momentum
                vw -= self.lr * dw
                vb -= self.lr * db
                net.layers[l].w += vw
                net.layers[l].b += vb
            else:
                net.layers[l].w -= self.lr * dw
                net.layers[l].b -= self.lr * db


def _optimizer(net, cfg: TrainConfig) -> _SGD:
    return _SGD(net, cfg.learning_rate, cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0)


def _batches(count: int, batch_size: int, rng) -> list:
    order = rng.permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def train_autoencoder(dataset, cfg: TrainConfig, hidden: int = 100, latent: int = 30, init=None):
    """Fit ``x -> E(x) -> G(E(x))`` by mini-batch SGD on mean ``||x - G(E(x))||^2``.

    Architecture: ``n -> hidden (sigmoid) -> latent (identity)`` for the
    encoder and ``latent -> hidden (sigmoid) -> n (sigmoid)`` for the
    decoder. ``init`` may pass ``(encoder, decoder)`` nets to start from.

    Returns:
        ``(encoder, generator, LatentSet, TrainHistory)``; the generator is the
        decoder and the latent set holds the encoder outputs of ``dataset``.
    """
    from .data import LatentSet

    x = np.asarray(dataset.x if hasattr(dataset, "x") else dataset, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (count, n) array")
    n = x.shape[1]
    if init is None:
        enc = init_generator([n, hidden, latent], ["sigmoid", "identity"], derive_seed(cfg.seed, "init-encoder"))
        dec = init_generator([latent, hidden, n], ["sigmoid", "sigmoid"], derive_seed(cfg.seed, "init-decoder"))
    else:
        enc, dec = (net.copy() for net in init)
    n_enc = len(enc.layers)
    ae = GeneratorNet(enc.layers + dec.layers, seed=cfg.seed)
    if ae.output_dim != n:
        raise ValueError(f"autoencoder outputs {ae.output_dim} values for {n}-dim data")

    opt = _optimizer(ae, cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "batch"))
    history = TrainHistory()

    def recon_loss():
        return float(np.mean(np.sum((x - ae(x)) ** 2, axis=1)))

    loss = recon_loss()
    best, stale = loss, 0
    history.rows.append(_row(0, "train", loss, float("nan"), float("nan"), float("nan")))
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        for idx in _batches(x.shape[0], cfg.batch_size, rng):
            trace = forward(ae, x[idx])
            grads = param_gradients(ae, trace, -2.0 * (x[idx] - trace.output) / idx.size)
            opt.step(ae, grads)
        loss = recon_loss()
        history.wall_time.append(time.perf_counter() - start)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"autoencoder loss became {loss} at epoch {epoch}")
        history.rows.append(_row(epoch, "train", loss, float("nan"), float("nan"), float("nan")))
        logger.info("ae epoch %d loss %.5f", epoch, loss)
        if cfg.early_stop_patience:
            if loss < best:
                best, stale = loss, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    encoder, generator = ae.split(n_enc)
    return encoder, generator, LatentSet(encoder(x)), history


def _row(epoch, split, fit, adv, lip, null):
    return {
        "epoch": epoch,
        "split": split,
        "fitting": fit,
        "adversarial": adv,
        "lipschitz_penalty": lip,
        "nullspace_penalty": null,
        "total": fit + adv,
    }


def mean_exact_risk(net, phi, z, y, eps: float) -> float:
    """Mean linearized worst-case sensed residual over samples."""
    z, y = np.atleast_2d(z), np.atleast_2d(y)
    resid = sensed_residuals(net, phi, z, y)
    jacs = sensed_jacobians(net, phi, z)
    return float(np.mean([solve_inner_max(jacs[i], resid[i], eps).value for i in range(z.shape[0])]))


def _monitor_rows(net, phi, z, y, eps, limit):
    idx = np.arange(min(limit, z.shape[0])) if limit else np.arange(z.shape[0])
    fit = float(np.mean(np.sum(sensed_residuals(net, phi, z, y) ** 2, axis=1)))
    adv = mean_exact_risk(net, phi, z[idx], y[idx], eps)
    lip, null, _, _ = layer_penalties(net, phi)
    return fit, adv, lip, null


def _check_targets(net, phi, z, y):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] == phi.n and phi.m != phi.n:
        raise ValueError("targets look like ambient images; pass sensed targets Phi x")
    if z.shape[0] != y.shape[0] or y.shape[1] != phi.m or z.shape[1] != net.input_dim:
        raise ValueError(f"latents {z.shape} and targets {y.shape} do not fit the net/mask")
    return z, y


def finetune_dcsat(generator, phi: SamplingMatrix, z, y, cfg: TrainConfig, test=None, adversarial=True):
    """Fine-tune a warm-start generator against the surrogate objective.

    Args:
        generator: warm-start net (left untouched; a copy is trained).
        phi: fixed sensing mask.
        z, y: training latents (N, k) and sensed targets (N, m).
        cfg: hyperparameters; ``cfg.eps`` must be set.
        test: optional ``(z_test, y_test)`` monitored every epoch.
        adversarial: False gives the plain DCS fit (both penalties off).

    Returns:
        ``(net, TrainHistory)``.
    """
    if cfg.eps is None or cfg.eps <= 0:
        raise ValueError("finetuning needs a positive eps")
    z, y = _check_targets(generator, phi, z, y)
    eps = cfg.eps
    lw, nw = cfg.penalty_weights(eps) if adversarial else (0.0, 0.0)
    half = 0.5 * (cfg.lam + 1.0)
    net = generator.copy()
    opt = _optimizer(net, cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "batch"))
    history = TrainHistory()

    def monitor(epoch):
        fit, adv, lip, null = _monitor_rows(net, phi, z, y, eps, cfg.monitor_samples)
        history.rows.append(_row(epoch, "train", fit, adv, lip, null))
        if test is not None:
            tz, ty = test
            fit_t, adv_t, _, _ = _monitor_rows(net, phi, tz, ty, eps, cfg.monitor_samples)
            history.rows.append(_row(epoch, "test", fit_t, adv_t, lip, null))
        return fit, adv

    fit, adv = monitor(0)
    best, stale = fit + adv, 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        for idx in _batches(z.shape[0], cfg.batch_size, rng):
            if adversarial:
                _, grads, _ = surrogate_training_loss(
                    net, phi, z[idx], y[idx], eps, cfg.lam, lw, nw, with_adversarial=False
                )
                scale = 1.0 / (idx.size * half)
            else:
                _, grads = fitting_loss(net, phi, z[idx], y[idx])
                scale = 1.0 / idx.size
            opt.step(net, [(scale * dw, scale * db) for dw, db in grads])
        history.wall_time.append(time.perf_counter() - start)
        fit, adv = monitor(epoch)
        if not (math.isfinite(fit) and math.isfinite(adv)):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
        logger.info("finetune epoch %d fit %.5f adv %.5f", epoch, fit, adv)
        if cfg.early_stop_patience:
            if fit + adv < best:
                best, stale = fit + adv, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return net, history


def train_dcs_baseline(generator, phi, z, y, cfg: TrainConfig, test=None):
    """DCS fine-tune: plain sensed fitting loss, no adversarial terms."""
    return finetune_dcsat(generator, phi, z, y, cfg, test=test, adversarial=False)


def calibrate_eps(net, phi, z, y, target_ratio: float = 1.3, lo: float = 1e-6, hi: float = 1e3) -> float:
    """Radius at which mean linearized risk is ``target_ratio`` times the mean fit."""
    if target_ratio <= 1.0:
        raise ValueError("target ratio must exceed 1")
    z, y = np.atleast_2d(z), np.atleast_2d(y)
    resid = sensed_residuals(net, phi, z, y)
    fit = float(np.mean(np.sum(resid**2, axis=1)))
    target = target_ratio * fit
    jacs = sensed_jacobians(net, phi, z)

    def risk(e):
        return float(np.mean([solve_inner_max(jacs[i], resid[i], e).value for i in range(z.shape[0])]))

    if risk(hi) < target:
        raise ValueError("target ratio unreachable below eps = %g" % hi)
    a, b = math.log(lo), math.log(hi)
    for _ in range(60):
        mid = 0.5 * (a + b)
        if risk(math.exp(mid)) < target:
            a = mid
        else:
            b = mid
    return math.exp(0.5 * (a + b))


def sort_records(records) -> list:
    """SR descending, DCS first, then lambda descending."""
    return sorted(
        records,
        key=lambda r: (-r.sr, 0 if r.method == "DCS" else 1, -(r.lam if r.lam is not None else 0.0)),
    )


def ablation_sweep(generator, train, test, lambdas, srs, cfg: TrainConfig, with_histories=False):
    """Train DCS once and DCSAT per lambda for every SR, scored on the test split.

    Args:
        generator: warm-start net.
        train, test: ``(latents, ambient images)`` pairs.
        lambdas, srs: sweep grid.
        cfg: base configuration; ``cfg.eps = None`` calibrates eps per SR on
            the warm start (``cfg.target_ratio``).

    Returns:
        records sorted as in :func:`sort_records` (and a dict of histories
        keyed by ``(method, lam, sr)`` when ``with_histories``).
    """
    lambdas, srs = list(lambdas), list(srs)
    if not lambdas or not srs:
        raise ValueError("need at least one lambda and one sampling rate")
    z_tr, x_tr = (np.asarray(a, dtype=float) for a in train)
    z_te, x_te = (np.asarray(a, dtype=float) for a in test)
    records, histories = [], {}
    attack_seed = derive_seed(cfg.seed, "attack")
    for sr in srs:
        phi = make_sampler(x_tr.shape[1], sr, derive_seed(cfg.seed, "mask"))
        y_tr, y_te = phi.apply(x_tr), phi.apply(x_te)
        mon = slice(0, cfg.monitor_samples or None)
        eps = cfg.eps
        if eps is None:
            eps = calibrate_eps(generator, phi, z_tr[mon], y_tr[mon], cfg.target_ratio)
        warm_risk = mean_exact_risk(generator, phi, z_tr[mon], y_tr[mon], eps)
        run_cfg = cfg.replace(eps=eps, sr=sr)
        runs = [("DCS", None)] + [("DCSAT", float(lam)) for lam in lambdas]
        for method, lam in runs:
            cell = run_cfg if lam is None else run_cfg.replace(lam=lam)
            rec = AblationRecord(method, lam, sr, float("nan"), float("nan"), float("nan"), cfg.seed, eps)
            try:
                net, hist = finetune_dcsat(
                    generator, phi, z_tr, y_tr, cell, test=(z_te, y_te), adversarial=method == "DCSAT"
                )
                histories[(method, lam, sr)] = hist
                failed = hist.final()["adversarial"] > FAIL_FACTOR * warm_risk
            except (TrainingDiverged, FloatingPointError, ArithmeticError) as exc:
                logger.warning("%s lam=%s sr=%s failed: %s", method, lam, sr, exc)
                net, failed = None, True
            if net is not None:
                ev = evaluate_model(net, phi, z_te, y_te, eps, cfg.n_queries, attack_seed)
                rec.fit_loss = ev.fit_loss
                rec.linearized_risk = float(np.mean([r["linearized_value"] for r in ev.per_sample]))
                if not math.isfinite(ev.adv_risk):
                    failed = True
                rec.adv_risk, rec.total = ev.adv_risk, ev.adv_risk + ev.fit_loss
            rec.failed = failed
            records.append(rec)
            logger.info("%s lam=%s sr=%s adv=%.5f fit=%.5f", method, lam, sr, rec.adv_risk, rec.fit_loss)
    records = sort_records(records)
    return (records, histories) if with_histories else records


def surrogate_tightness_check(generator, phi, z, y, eps: float, steps: int, cfg: TrainConfig) -> dict:
    """Take ``steps`` full-batch surrogate steps and report how the exact risk moved.

    Besides the exact linearized risk before/after, reports the mean top
    singular value of ``P_i = Phi J(z_i)``, the mean top eigenvalue
    ``Lambda_11`` and the mean relative change of ``||U^T y_hat||``.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    z, y = _check_targets(generator, phi, z, y)
    lw, nw = cfg.penalty_weights(eps)
    half = 0.5 * (cfg.lam + 1.0)

    def stats(net):
        resid = sensed_residuals(net, phi, z, y)
        jacs = sensed_jacobians(net, phi, z)
        sols = [solve_inner_max(jacs[i], resid[i], eps) for i in range(z.shape[0])]
        svals, proj, lam11 = [], [], []
        for i in range(z.shape[0]):
            u, s, _ = np.linalg.svd(jacs[i], full_matrices=False)
            svals.append(s[0])
            lam11.append(s[0] ** 2)
            proj.append(np.linalg.norm(u.T @ resid[i]))
        return (
            float(np.mean([s.value for s in sols])),
            float(np.mean(svals)),
            np.array(proj),
            float(np.mean(np.sum(resid**2, axis=1))),
            float(np.mean(lam11)),
        )

    risk0, sig0, proj0, fit0, lam0 = stats(generator)
    net = generator.copy()
    opt = _optimizer(net, cfg)
    for _ in range(steps):
        _, grads, _ = surrogate_training_loss(net, phi, z, y, eps, cfg.lam, lw, nw, with_adversarial=False)
        scale = 1.0 / (z.shape[0] * half)
        opt.step(net, [(scale * dw, scale * db) for dw, db in grads])
    risk1, sig1, proj1, fit1, lam1 = stats(net)
    with np.errstate(invalid="ignore", divide="ignore"):
        uty_change = float(np.mean(np.abs(proj1 - proj0) / np.maximum(proj0, 1e-300)))
    return {
        "steps": steps,
        "risk_before": risk0,
        "risk_after": risk1,
        "reduction": (risk0 - risk1) / risk0 if risk0 > 0 else 0.0,
        "top_sigma_before": sig0,
        "top_sigma_after": sig1,
        "lambda11_before": lam0,
        "lambda11_after": lam1,
        "fit_before": fit0,
        "fit_after": fit1,
        "uty_relative_change": uty_change,
        "net": net,
    }
