"""Command line entry point: ``dcsat <subcommand> [flags]``.

Subcommands mirror the pipeline stages: ``export-mnist``, ``train-ae``,
``finetune``, ``ablate``, ``attack`` and ``check``. Options can also come from
a flat ``key = value`` file passed with ``--config``; explicit flags win over
the file, the file wins over built-in defaults.

Exit codes: 0 success, 1 runtime failure (including failed checks), 2 usage
error or missing input.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .attack import evaluate_model
from .data import (
    Dataset,
    LatentSet,
    export_mnist_subset,
    find_mnist_files,
    load_latents,
    load_mnist_idx,
    save_latents,
    synthetic_dataset,
)
from .linalg import operator_norm
from .losses import exact_adv_risk, surrogate_bound
from .network import finite_diff_jacobian, init_generator, jacobian_at, load_net, save_net
from .sensing import load_mask, make_sampler, save_mask
from .training import (
    AblationRecord,
    TrainConfig,
    TrainingDiverged,
    ablation_sweep,
    calibrate_eps,
    derive_seed,
    finetune_dcsat,
    mean_exact_risk,
    records_to_csv,
    train_autoencoder,
)
from .trustregion import oracle_inner_max, solve_inner_max, verify_kkt

logger = logging.getLogger("dcsat")


class UsageError(Exception):
    """Bad flags or missing inputs (exit code 2)."""


def _floats(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _optional_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


# name -> (type, default, help); shared by flag parsing and --config files
COMMON = {
    "seed": (int, 0, "master seed; mask, init, batch order and attack streams derive from it"),
    "out": (str, "run", "output directory"),
}
DATA = {
    "data": (str, None, "directory with MNIST IDX files, or 'synthetic'"),
    "limit": (int, 2000, "training images to use"),
    "test_limit": (int, 500, "test images to use"),
    "synthetic_n": (int, 64, "ambient size of the synthetic teacher data"),
}
TRAIN = {
    "learning_rate": (float, 0.05, "SGD step size"),
    "epochs": (int, 30, "passes over the training set"),
    "batch_size": (int, 50, "mini-batch size"),
    "optimizer": (str, "sgd_momentum", "sgd or sgd_momentum"),
    "momentum": (float, 0.9, "momentum coefficient"),
}
FINETUNE = {
    "warm": (str, None, "directory written by train-ae"),
    "eps": (_optional_float, None, "latent attack radius; omitted means calibrated"),
    "target_ratio": (float, 1.3, "calibration target: warm-start risk / fit"),
    "sr": (float, 0.8, "sampling rate"),
    "lipschitz_weight": (_optional_float, None, "Lipschitz penalty weight (default eps^2)"),
    "nullspace_weight": (_optional_float, None, "null-space penalty weight (default eps^2)"),
    "monitor_samples": (int, 200, "samples used for per-epoch risk monitoring"),
    "queries": (int, 4096, "random directions per test sample"),
}
SPECS = {
    "export-mnist": dict(COMMON, n_train=(int, 2000, "training digits"), n_test=(int, 500, "test digits")),
    "train-ae": dict(COMMON, **DATA, **TRAIN, hidden=(int, 100, "hidden width"), latent=(int, 30, "latent size")),
    "finetune": dict(
        COMMON,
        **DATA,
        **TRAIN,
        **FINETUNE,
        mode=(str, "dcsat", "dcsat or dcs"),
        lam=(float, 2e4, "weight of the fitting term"),
    ),
    "ablate": dict(
        COMMON,
        **DATA,
        **TRAIN,
        **FINETUNE,
        lambdas=(_floats, [2e3, 2e4, 2e5], "comma-separated lambda grid"),
        srs=(_floats, [0.8, 0.6], "comma-separated sampling rates"),
    ),
    "attack": dict(
        COMMON,
        **DATA,
        generator=(str, None, "generator checkpoint"),
        mask=(str, None, "sensing mask file"),
        latents=(str, None, "latent CSV of the evaluated samples"),
        split=(str, "test", "which split the latents belong to"),
        eps=(float, None, "latent attack radius"),
        queries=(int, 4096, "random directions per sample"),
    ),
    "check": dict(
        COMMON,
        instances=(int, 200, "random instances per suite"),
        corrupt_solver=(bool, False, "deliberately perturb solver output (negative fixture)"),
    ),
}
ALIASES = {"lambda": "lam", "lr": "learning_rate"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcsat", description="Adversarially robust deep compressed sensing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in SPECS.items():
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (kind, default, text) in spec.items():
            flag = "--" + key.replace("_", "-")
            shown = f" (default: {default})" if default is not None else ""
            if kind is bool:
                p.add_argument(flag, action="store_true", default=None, help=text)
            elif key == "lam":
                p.add_argument("--lambda", dest="lam", type=kind, help=text + shown)
            else:
                p.add_argument(flag, type=kind, help=text + shown)
    return parser


def _read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key).replace("-", "_")
        values[key] = val
    return values


def resolve(args) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    spec = SPECS[args.command]
    from_file = _read_config_file(args.config) if args.config else {}
    unknown = set(from_file) - set(spec)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
    opts = {}
    for key, (kind, default, _) in spec.items():
        value = getattr(args, key)
        if value is None and key in from_file:
            raw = from_file[key]
            try:
                value = raw.lower() in ("1", "true", "yes") if kind is bool else kind(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        opts[key] = default if value is None else value
    return opts


def git_blob_sha1(path) -> str:
    """Content hash in git's blob format, so it matches ``git hash-object``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_manifest(out: Path, command: str, opts: dict, inputs, outputs, started: str) -> None:
    """``manifest.json`` next to the outputs; enough to replay the run."""
    manifest = {
        "command": command,
        "config": opts,
        "inputs": {str(p): git_blob_sha1(p) for p in inputs},
        "outputs": {str(p): git_blob_sha1(p) for p in outputs},
        "started": started,
        "finished": _now(),
        "version": __version__,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _require(path, what) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_data(opts):
    """Train and test images as (count, n) arrays in [0, 1]."""
    source = opts["data"]
    if source is None:
        raise UsageError("--data is required (an MNIST IDX directory or 'synthetic')")
    if source == "synthetic":
        total = opts["limit"] + opts["test_limit"]
        ds, _, _ = synthetic_dataset(4, opts["synthetic_n"], total, derive_seed(opts["seed"], "data"))
        return ds.x[: opts["limit"]], ds.x[opts["limit"] :], []
    directory = _require(source, "data")
    try:
        train_files = find_mnist_files(directory, "train")
        test_files = find_mnist_files(directory, "test")
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    train = load_mnist_idx(*train_files, limit=opts["limit"])
    test = load_mnist_idx(*test_files, limit=opts["test_limit"])
    return train.x, test.x, [*train_files, *test_files]


def _train_config(opts, **extra) -> TrainConfig:
    keys = ("learning_rate", "epochs", "batch_size", "optimizer", "momentum", "seed")
    return TrainConfig(**{k: opts[k] for k in keys}, **extra)


def _finetune_config(opts) -> TrainConfig:
    return _train_config(
        opts,
        eps=opts["eps"],
        sr=opts["sr"],
        lipschitz_weight=opts["lipschitz_weight"],
        nullspace_weight=opts["nullspace_weight"],
        monitor_samples=opts["monitor_samples"],
        n_queries=opts["queries"],
        target_ratio=opts["target_ratio"],
    )


def _load_warm(opts):
    warm = _require(opts["warm"], "warm")
    paths = [warm / "generator.ckpt", warm / "latents_train.csv", warm / "latents_test.csv"]
    for p in paths:
        if not p.exists():
            raise UsageError(f"warm start file not found: {p}")
    return load_net(paths[0]), load_latents(paths[1]).z, load_latents(paths[2]).z, paths


def _check_counts(z_tr, x_tr, z_te, x_te):
    if z_tr.shape[0] != x_tr.shape[0] or z_te.shape[0] != x_te.shape[0]:
        raise UsageError(
            f"latent files hold {z_tr.shape[0]}/{z_te.shape[0]} rows but the data gives "
            f"{x_tr.shape[0]}/{x_te.shape[0]} images; use the --limit/--test-limit of train-ae"
        )


def cmd_export_mnist(opts) -> int:
    """Write the bundled 5,000-digit MNIST sample as a disjoint train/test IDX subset."""
    out = Path(opts["out"])
    started = _now()
    export_mnist_subset(out, opts["n_train"], opts["n_test"], opts["seed"])
    files = sorted(p for p in out.iterdir() if p.name.endswith("ubyte"))
    write_manifest(out, "export-mnist", opts, [], files, started)
    print(f"wrote {len(files)} IDX files to {out}")
    return 0


def cmd_train_ae(opts) -> int:
    """Train the autoencoder; writes encoder, generator, latents and history."""
    x_tr, x_te, inputs = _load_data(opts)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    enc, gen, lat, hist = train_autoencoder(Dataset(x_tr), _train_config(opts), opts["hidden"], opts["latent"])
    outputs = [
        out / "encoder.ckpt",
        out / "generator.ckpt",
        out / "latents_train.csv",
        out / "latents_test.csv",
        out / "history_ae.csv",
    ]
    save_net(enc, outputs[0])
    save_net(gen, outputs[1])
    save_latents(lat, outputs[2])
    save_latents(LatentSet(enc(x_te)), outputs[3])
    _atomic_write(outputs[4], hist.to_csv())
    write_manifest(out, "train-ae", opts, inputs, outputs, started)
    print(f"autoencoder train loss {hist.final()['fitting']:.6f}; outputs in {out}")
    return 0


def cmd_finetune(opts) -> int:
    """Fine-tune the warm-start generator (mode dcsat) or run the fitting baseline (mode dcs)."""
    if opts["mode"] not in ("dcs", "dcsat"):
        raise UsageError(f"--mode must be dcs or dcsat, got {opts['mode']!r}")
    gen, z_tr, z_te, warm_files = _load_warm(opts)
    x_tr, x_te, inputs = _load_data(opts)
    _check_counts(z_tr, x_tr, z_te, x_te)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    phi = make_sampler(x_tr.shape[1], opts["sr"], derive_seed(opts["seed"], "mask"))
    y_tr, y_te = phi.apply(x_tr), phi.apply(x_te)
    cfg = _finetune_config(opts)
    mon = slice(0, cfg.monitor_samples or None)
    eps = cfg.eps if cfg.eps is not None else calibrate_eps(gen, phi, z_tr[mon], y_tr[mon], cfg.target_ratio)
    adversarial = opts["mode"] == "dcsat"
    lam = opts["lam"] if adversarial else None
    cfg = cfg.replace(eps=eps, lam=opts["lam"])
    warm_risk = mean_exact_risk(gen, phi, z_tr[mon], y_tr[mon], eps)

    method = "DCSAT" if adversarial else "DCS"
    record = AblationRecord(method, lam, opts["sr"], float("nan"), float("nan"), float("nan"), opts["seed"], eps)
    outputs = [out / "mask.txt", out / "generator.ckpt", out / "history.csv", out / "record.csv"]
    save_mask(phi, outputs[0])
    try:
        net, hist = finetune_dcsat(gen, phi, z_tr, y_tr, cfg, test=(z_te, y_te), adversarial=adversarial)
    except TrainingDiverged as exc:
        record.failed = True
        _atomic_write(outputs[3], records_to_csv([record]))
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    ev = evaluate_model(net, phi, z_te, y_te, eps, cfg.n_queries, derive_seed(opts["seed"], "attack"))
    record.adv_risk, record.fit_loss, record.total = ev.adv_risk, ev.fit_loss, ev.adv_risk + ev.fit_loss
    record.linearized_risk = float(np.mean([r["linearized_value"] for r in ev.per_sample]))
    record.failed = hist.final()["adversarial"] > 5.0 * warm_risk
    save_net(net, outputs[1])
    _atomic_write(outputs[2], hist.to_csv())
    _atomic_write(outputs[3], records_to_csv([record]))
    write_manifest(out, "finetune", opts, [*warm_files, *inputs], outputs, started)
    print(f"{method} eps={eps:.6g} adv_risk={ev.adv_risk:.6f} fit_loss={ev.fit_loss:.6f}")
    return 0


def cmd_ablate(opts) -> int:
    """Lambda x sampling-rate sweep; writes the ablation CSV."""
    if not opts["lambdas"] or not opts["srs"]:
        raise UsageError("--lambdas and --srs need at least one value each")
    gen, z_tr, z_te, warm_files = _load_warm(opts)
    x_tr, x_te, inputs = _load_data(opts)
    _check_counts(z_tr, x_tr, z_te, x_te)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    records = ablation_sweep(gen, (z_tr, x_tr), (z_te, x_te), opts["lambdas"], opts["srs"], _finetune_config(opts))
    path = out / "ablation.csv"
    _atomic_write(path, records_to_csv(records))
    write_manifest(out, "ablate", opts, [*warm_files, *inputs], [path], started)
    for r in records:
        print(r.csv_row())
    # failed cells are marked in the CSV; the sweep itself succeeded
    return 0


def cmd_attack(opts) -> int:
    """Random-direction attack on a trained generator; writes per-sample risks."""
    gen_path = _require(opts["generator"], "generator")
    mask_path = _require(opts["mask"], "mask")
    lat_path = _require(opts["latents"], "latents")
    if opts["eps"] is None or opts["eps"] < 0:
        raise UsageError("--eps must be given and nonnegative")
    if opts["split"] not in ("train", "test"):
        raise UsageError("--split must be train or test")
    net, phi, z = load_net(gen_path), load_mask(mask_path), load_latents(lat_path).z
    x_tr, x_te, inputs = _load_data(opts)
    x = x_tr if opts["split"] == "train" else x_te
    if x.shape[0] != z.shape[0]:
        raise UsageError(f"{lat_path} holds {z.shape[0]} latents but the {opts['split']} split has {x.shape[0]}")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    ev = evaluate_model(net, phi, z, phi.apply(x), opts["eps"], opts["queries"], derive_seed(opts["seed"], "attack"))
    lines = ["index,attack_risk,fit_loss,linearized_value"]
    lines += [
        f"{r['index']},{r['attack_risk']!r},{r['fit_loss']!r},{r['linearized_value']!r}" for r in ev.per_sample
    ]
    path = out / "attack.csv"
    _atomic_write(path, "\n".join(lines) + "\n")
    write_manifest(out, "attack", opts, [gen_path, mask_path, lat_path, *inputs], [path], started)
    print(f"adv_risk={ev.adv_risk:.6f} fit_loss={ev.fit_loss:.6f} total={ev.total:.6f}")
    return 0


def run_checks(instances: int, seed: int, corrupt: bool = False) -> list:
    """Oracle suites; returns a list of failure messages (empty when healthy)."""
    failures = []
    rng = np.random.default_rng(derive_seed(seed, "check"))
    for i in range(instances):
        m, k = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        p, y = rng.standard_normal((m, k)), rng.standard_normal(m)
        eps = float(rng.choice([0.1, 1.0, 10.0]))
        sol = solve_inner_max(p, y, eps)
        if corrupt:
            # shrink the step: feasible but no longer optimal, KKT breaks
            sol = type(sol)(0.9 * sol.delta_z, sol.mu, sol.value, 0.0, 0.0, sol.hard_case)
        value = float(np.sum((y - p @ sol.delta_z) ** 2))
        oracle = oracle_inner_max(p, y, eps, restarts=16, seed=i, max_iter=20000)
        if value < oracle - 1e-6 * (1 + value):
            failures.append(f"trust-region instance {i}: value {value!r} below oracle {oracle!r}")
        kkt = verify_kkt(p, y, eps, sol)
        if not kkt.ok(1e-8):
            failures.append(f"trust-region instance {i}: KKT residual {kkt.max_residual!r}")
    for i in range(max(1, instances // 10)):
        dims = [int(rng.integers(2, 8)), int(rng.integers(2, 8)), int(rng.integers(2, 8))]
        net = init_generator(dims, ["tanh", "sigmoid"], derive_seed(seed, f"check-net-{i}"))
        z = rng.standard_normal(dims[0])
        dev = float(np.max(np.abs(jacobian_at(net, z) - finite_diff_jacobian(net, z))))
        if dev > 1e-6:
            failures.append(f"jacobian net {i}: deviation {dev!r}")
        phi = make_sampler(dims[-1], 0.7, i + 1)
        y = rng.uniform(0, 1, phi.m)
        eps = float(rng.uniform(0.05, 2.0))
        adv = exact_adv_risk(net, phi, z, y, eps)
        bound = surrogate_bound(net, phi, z, y, eps)
        if adv > bound * (1 + 1e-10):
            failures.append(f"bound instance {i}: risk {adv!r} above bound {bound!r}")
    sigma = operator_norm(np.diag([3.0, 1.0]))[0]
    if abs(sigma - 3.0) > 1e-10:
        failures.append(f"operator norm of diag(3, 1) is {sigma!r}")
    return failures


def cmd_check(opts) -> int:
    """Self-test: trust-region vs search oracle, Jacobian vs finite differences, bound soundness."""
    failures = run_checks(opts["instances"], opts["seed"], opts["corrupt_solver"])
    for msg in failures:
        print("FAIL " + msg)
    print(f"{len(failures)} failure(s)" if failures else "all checks passed")
    return 1 if failures else 0


COMMANDS = {
    "export-mnist": cmd_export_mnist,
    "train-ae": cmd_train_ae,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "attack": cmd_attack,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"dcsat {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ArithmeticError, ValueError, OSError) as exc:
        print(f"dcsat {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
