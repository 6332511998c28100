import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcsat.attack import evaluate_model, omni_attack
from dcsat.data import synthetic_dataset
from dcsat.network import DenseLayer, GeneratorNet, init_generator
from dcsat.sensing import make_sampler
from dcsat.trustregion import solve_inner_max


def linear_case(seed, k=4, n=6):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, k))
    net = GeneratorNet([DenseLayer(w, np.zeros(n), "identity")])
    phi = make_sampler(n, 0.9, seed)
    z = rng.standard_normal(k)
    y = rng.standard_normal(phi.m)
    return net, phi, w, z, y


def test_constant_net_risk_is_unperturbed():
    phi = make_sampler(5, 0.6, 0)
    net = GeneratorNet([DenseLayer(np.zeros((5, 3)), np.full(5, 0.2), "identity")])
    y = np.array([1.0, 0.0, -1.0])
    res = omni_attack(net, phi, np.zeros(3), y, 2.0, 64, seed=1)
    expected = float(np.sum((y - 0.2) ** 2))
    assert res.risk == pytest.approx(expected) and res.unperturbed == pytest.approx(expected)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_net_reaches_closed_form(seed):
    net, phi, w, z, y = linear_case(seed)
    eps = 0.1
    res = omni_attack(net, phi, z, y, eps, 10_000, seed=seed)
    exact = solve_inner_max(phi.compose(w), y - phi.apply(w @ z), eps).value
    assert res.linearized_value == pytest.approx(exact, rel=1e-12)
    assert res.risk >= 0.95 * exact
    assert res.risk <= exact + 1e-9


def test_prefix_monotone_in_queries():
    net, phi, _, z, y = linear_case(5)
    risks = [omni_attack(net, phi, z, y, 0.5, q, seed=9).risk for q in (1, 10, 100, 1000)]
    assert np.all(np.diff(risks) >= 0)


def test_deterministic_single_query():
    net, phi, _, z, y = linear_case(6)
    a = omni_attack(net, phi, z, y, 0.5, 1, seed=3)
    b = omni_attack(net, phi, z, y, 0.5, 1, seed=3)
    np.testing.assert_array_equal(a.best_delta_z, b.best_delta_z)
    assert a.risk == b.risk
    assert np.linalg.norm(a.best_delta_z) == pytest.approx(0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.one_of(st.just(0.0), st.floats(1e-100, 3.0)))
def test_never_below_unperturbed(seed, eps):
    net = init_generator([3, 5, 6], ["tanh", "sigmoid"], seed)
    phi = make_sampler(6, 0.5, seed)
    rng = np.random.default_rng(seed)
    z, y = rng.standard_normal(3), rng.uniform(0, 1, phi.m)
    res = omni_attack(net, phi, z, y, eps, 32, seed=seed)
    assert res.risk >= res.unperturbed


def test_eval_eps_zero():
    ds, lat, teacher = synthetic_dataset(3, 8, 5, 2)
    phi = make_sampler(8, 0.5, 2)
    net = init_generator([3, 8], "sigmoid", 0)
    ev = evaluate_model(net, phi, lat.z, phi.apply(ds.x), 0.0, 16, seed=0)
    assert ev.adv_risk == pytest.approx(ev.fit_loss)
    assert ev.total == pytest.approx(2 * ev.fit_loss)
    perfect = evaluate_model(teacher, phi, lat.z, phi.apply(ds.x), 0.0, 16, seed=0)
    # sensed-row evaluation may differ from the full pass in the last ulp
    assert max(perfect.adv_risk, perfect.fit_loss, perfect.total) <= 1e-28


def test_eval_total_identity_and_order_independence():
    ds, lat, _ = synthetic_dataset(3, 8, 6, 4)
    phi = make_sampler(8, 0.75, 4)
    net = init_generator([3, 8], "sigmoid", 1)
    y = phi.apply(ds.x)
    ev = evaluate_model(net, phi, lat.z, y, 0.3, 50, seed=11)
    assert abs(ev.total - (ev.adv_risk + ev.fit_loss)) <= 1e-9
    sub = evaluate_model(net, phi, lat.z[:3], y[:3], 0.3, 50, seed=11)
    for a, b in zip(ev.per_sample[:3], sub.per_sample):
        assert a["attack_risk"] == b["attack_risk"]


def test_bad_arguments():
    net, phi, _, z, y = linear_case(0)
    with pytest.raises(ValueError):
        omni_attack(net, phi, z, y, 0.1, 0)
    with pytest.raises(ValueError):
        omni_attack(net, phi, z, y, -0.1, 5)
