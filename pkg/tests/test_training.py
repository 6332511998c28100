import numpy as np
import pytest

from dcsat.data import Dataset, synthetic_dataset
from dcsat.network import DenseLayer, GeneratorNet, init_generator
from dcsat.sensing import make_sampler
from dcsat.training import (
    AblationRecord,
    TrainConfig,
    ablation_sweep,
    calibrate_eps,
    derive_seed,
    finetune_dcsat,
    mean_exact_risk,
    read_config,
    records_to_csv,
    sort_records,
    surrogate_tightness_check,
    train_autoencoder,
    train_dcs_baseline,
    write_config,
)


@pytest.fixture(scope="module")
def desk():
    ds, lat, teacher = synthetic_dataset(3, 12, 120, 5)
    warm = init_generator(teacher.dims, teacher.activations, 8)
    phi = make_sampler(12, 0.75, 2)
    return ds, lat, warm, phi


def same_weights(a, b):
    return all(np.array_equal(x.w, y.w) and np.array_equal(x.b, y.b) for x, y in zip(a.layers, b.layers))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(eps=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="adam")


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(lam=2e3, eps=0.25, seed=4, lipschitz_weight=0.5)
    write_config(cfg, tmp_path / "c.cfg")
    assert "lambda = 2000.0" in (tmp_path / "c.cfg").read_text()
    assert read_config(tmp_path / "c.cfg") == cfg


def test_config_rejects_unknown_key(tmp_path):
    (tmp_path / "c.cfg").write_text("lambda = 5\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        read_config(tmp_path / "c.cfg")


def test_derive_seed_streams():
    assert derive_seed(0, "mask") == derive_seed(0, "mask")
    assert derive_seed(0, "mask") != derive_seed(0, "attack")
    assert derive_seed(0, "mask") != derive_seed(1, "mask")
    assert 0 <= derive_seed(3, "batch") < 2**63


def test_identity_autoencoder_zero_loss():
    k = 4
    eye = GeneratorNet([DenseLayer(np.eye(k), np.zeros(k), "identity")])
    x = np.random.default_rng(0).uniform(0, 1, (10, k))
    cfg = TrainConfig(epochs=0)
    _, _, lat, hist = train_autoencoder(Dataset(x), cfg, init=(eye, eye.copy()))
    assert hist.rows[0]["fitting"] == 0.0
    np.testing.assert_array_equal(lat.z, x)


def test_autoencoder_on_teacher_data():
    ds, _, _ = synthetic_dataset(3, 10, 500, 0)
    cfg = TrainConfig(learning_rate=0.2, epochs=200, batch_size=25)
    enc, gen, lat, hist = train_autoencoder(ds, cfg, hidden=8, latent=3)
    assert hist.final()["fitting"] <= 1e-2
    assert enc.dims == [10, 8, 3] and gen.dims == [3, 8, 10]
    assert lat.z.shape == (500, 3)


def test_autoencoder_monotone_without_momentum():
    ds, _, _ = synthetic_dataset(3, 10, 200, 1)
    cfg = TrainConfig(learning_rate=0.01, epochs=15, batch_size=200, optimizer="sgd")
    _, _, _, hist = train_autoencoder(ds, cfg, hidden=8, latent=3)
    losses = [r["fitting"] for r in hist.rows]
    assert np.all(np.diff(losses) <= 0)


def test_zero_epochs_returns_warm_start(desk):
    ds, lat, warm, phi = desk
    cfg = TrainConfig(eps=0.2, epochs=0, monitor_samples=10)
    net, hist = finetune_dcsat(warm, phi, lat.z, phi.apply(ds.x), cfg)
    assert same_weights(net, warm) and hist.epochs == 0


def test_sensing_and_warm_start_untouched(desk):
    ds, lat, warm, phi = desk
    before = phi.selected.copy()
    snapshot = warm.copy()
    finetune_dcsat(warm, phi, lat.z, phi.apply(ds.x), TrainConfig(eps=0.2, epochs=2, monitor_samples=10))
    np.testing.assert_array_equal(phi.selected, before)
    assert same_weights(warm, snapshot)


def test_zero_penalty_weights_reduce_to_dcs(desk):
    ds, lat, warm, phi = desk
    y = phi.apply(ds.x)
    base = TrainConfig(eps=0.2, epochs=2, monitor_samples=10)
    a, _ = finetune_dcsat(warm, phi, lat.z, y, base.replace(lam=1e6, lipschitz_weight=0.0, nullspace_weight=0.0))
    b, _ = train_dcs_baseline(warm, phi, lat.z, y, base)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_allclose(la.w, lb.w, rtol=1e-9, atol=1e-12)


def test_ambient_targets_rejected(desk):
    ds, lat, warm, phi = desk
    with pytest.raises(ValueError):
        finetune_dcsat(warm, phi, lat.z, ds.x, TrainConfig(eps=0.2, epochs=1))


def test_needs_eps(desk):
    ds, lat, warm, phi = desk
    with pytest.raises(ValueError):
        finetune_dcsat(warm, phi, lat.z, phi.apply(ds.x), TrainConfig(epochs=1))


def test_history_deterministic(desk):
    ds, lat, warm, phi = desk
    cfg = TrainConfig(eps=0.2, epochs=3, monitor_samples=10, lam=100.0)
    y = phi.apply(ds.x)
    h1 = finetune_dcsat(warm, phi, lat.z, y, cfg)[1]
    h2 = finetune_dcsat(warm, phi, lat.z, y, cfg)[1]
    assert h1.to_csv() == h2.to_csv()
    assert h1.epochs == 3 and len(h1.rows) == 4


def test_calibrated_eps_hits_ratio(desk):
    ds, lat, warm, phi = desk
    y = phi.apply(ds.x)
    eps = calibrate_eps(warm, phi, lat.z[:30], y[:30], 1.5)
    fit = float(np.mean(np.sum((y[:30] - phi.apply(warm(lat.z[:30]))) ** 2, axis=1)))
    assert mean_exact_risk(warm, phi, lat.z[:30], y[:30], eps) == pytest.approx(1.5 * fit, rel=1e-6)


def test_record_csv_and_fail_marker():
    ok = AblationRecord("DCSAT", 2e3, 0.8, 5.25, 4.43, 9.68, seed=1, eps=0.3, linearized_risk=5.0)
    bad = AblationRecord("DCSAT", 2e5, 0.6, float("nan"), 3.0, float("nan"), failed=True)
    text = records_to_csv([ok, bad]).splitlines()
    assert text[0] == "method,lambda,sr,adv_risk,fit_loss,total,seed,eps,linearized_risk"
    assert text[1].startswith("DCSAT,2000.0,0.8,5.25,4.43,9.68,1,")
    assert text[2].split(",")[3] == "fail" and text[2].split(",")[5] == ""
    dcs = AblationRecord("DCS", None, 0.8, 1.0, 1.0, 2.0)
    assert dcs.csv_row().split(",")[1] == ""


def test_sort_order():
    recs = [
        AblationRecord("DCSAT", 2e3, 0.6, 1, 1, 2),
        AblationRecord("DCSAT", 2e5, 0.8, 1, 1, 2),
        AblationRecord("DCS", None, 0.6, 1, 1, 2),
        AblationRecord("DCSAT", 2e3, 0.8, 1, 1, 2),
        AblationRecord("DCS", None, 0.8, 1, 1, 2),
    ]
    keys = [(r.method, r.lam, r.sr) for r in sort_records(recs)]
    assert keys == [
        ("DCS", None, 0.8),
        ("DCSAT", 2e5, 0.8),
        ("DCSAT", 2e3, 0.8),
        ("DCS", None, 0.6),
        ("DCSAT", 2e3, 0.6),
    ]


def test_sweep_cardinality_and_identity(desk):
    ds, lat, warm, _ = desk
    cfg = TrainConfig(epochs=1, monitor_samples=10, n_queries=16, seed=3)
    train = (lat.z[:80], ds.x[:80])
    test = (lat.z[80:], ds.x[80:])
    single = ablation_sweep(warm, train, test, [1e3], [0.75], cfg)
    assert [r.method for r in single] == ["DCS", "DCSAT"]
    grid = ablation_sweep(warm, train, test, [2e3, 2e4, 2e5], [0.8, 0.6], cfg)
    assert len(grid) == 8
    for r in grid:
        assert abs(r.total - (r.adv_risk + r.fit_loss)) <= 1e-9
        assert (r.lam is None) == (r.method == "DCS")
    # one eps per sampling rate, shared by the cells at that rate
    assert len({(r.sr, r.eps) for r in grid}) == 2
    with pytest.raises(ValueError):
        ablation_sweep(warm, train, test, [], [0.8], cfg)


def test_tightness_zero_steps(desk):
    ds, lat, warm, phi = desk
    rep = surrogate_tightness_check(warm, phi, lat.z[:20], phi.apply(ds.x[:20]), 0.3, 0, TrainConfig(lam=1e5))
    assert rep["reduction"] == 0.0 and rep["uty_relative_change"] == 0.0


def test_penalty_steps_shrink_top_singular_value(desk):
    ds, lat, warm, phi = desk
    z, y = lat.z[:20], phi.apply(ds.x[:20])
    # huge lambda with explicit weights: fit term negligible, penalties drive the step
    cfg = TrainConfig(lam=1e9, learning_rate=1e-3, optimizer="sgd", lipschitz_weight=1e6, nullspace_weight=1e6)
    rep = surrogate_tightness_check(warm, phi, z, y, 0.3, 20, cfg)
    assert rep["top_sigma_after"] < rep["top_sigma_before"]
    assert rep["lambda11_after"] < rep["lambda11_before"]
