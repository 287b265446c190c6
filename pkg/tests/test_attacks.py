from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rlbind import gradcore as gc
from rlbind.attacks import AttackConfig, apgd_attack, pgd_attack, project_linf, run_attack
from rlbind.encoders import Encoder, Layer, snapshot_frozen
from rlbind.gradcore import Tensor
from rlbind.losses import fare_loss

unit = arrays(np.float64, 5, elements=st.floats(0, 1))


def linear_loss(w):
    w = np.asarray(w, dtype=float)
    return lambda z: gc.sum_(z * w, axis=-1)


def feasible(z, x, eps):
    return np.max(np.abs(z - x)) <= eps + 1e-12 and z.min() >= 0.0 and z.max() <= 1.0


@pytest.mark.parametrize("attack", [pgd_attack, apgd_attack])
def test_zero_radius_returns_input(attack, rng):
    x = rng.uniform(size=(3, 4))
    z = attack(linear_loss(rng.normal(size=4)), x, AttackConfig(epsilon=0, random_start=True))
    np.testing.assert_array_equal(z, x)


@pytest.mark.parametrize("attack", [pgd_attack, apgd_attack])
def test_linear_closed_form(attack):
    z = attack(linear_loss([1.0, -2.0]), np.array([0.5, 0.5]), AttackConfig(epsilon=0.1, n_iter=10))
    np.testing.assert_array_equal(z, [0.6, 0.4])


@pytest.mark.parametrize("attack", [pgd_attack, apgd_attack])
def test_linear_closed_form_random(attack, rng):
    for _ in range(20):
        w = rng.normal(size=6)
        x = rng.uniform(0.1, 0.9, size=6)
        eps = float(rng.uniform(0.01, 0.1))
        z = attack(linear_loss(w), x, AttackConfig(epsilon=eps, n_iter=20, random_start=True, seed=3))
        np.testing.assert_allclose(z, np.clip(x + eps * np.sign(w), 0, 1), atol=1e-15)


@pytest.mark.parametrize("mode", ["pgd", "apgd"])
def test_best_iterate_not_below_clean(mode, rng):
    loss = lambda z: gc.sum_(gc.exp(gc.power(z - 0.3, 2.0) * -20.0) * -1.0, axis=-1)
    x = rng.uniform(size=(16, 3))
    with gc.no_grad():
        clean = loss(Tensor(x)).data
    z, best = run_attack(loss, x, AttackConfig(epsilon=0.05, n_iter=10, mode=mode, random_start=True))
    assert np.all(best >= clean)
    with gc.no_grad():
        np.testing.assert_array_equal(loss(Tensor(z)).data, best)


def _double_well(x, eps, seed, mode, n_iter=20):
    # multimodal 1-D objective; the better mode sits further away from x
    loss = lambda z: gc.sum_(gc.exp(gc.power(z - 0.45, 2.0) * -400.0) * 1.0
                             + gc.exp(gc.power(z - 0.62, 2.0) * -150.0) * 2.0, axis=-1)
    cfg = AttackConfig(epsilon=eps, n_iter=n_iter, mode=mode, random_start=True, seed=seed)
    return run_attack(loss, np.array([x]), cfg)[1].item()


def test_double_well_apgd_beats_pgd():
    wins = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = float(r.uniform(0.4, 0.55))
        eps = float(r.uniform(0.08, 0.2))
        if _double_well(x, eps, seed, "apgd") >= _double_well(x, eps, seed, "pgd") - 1e-12:
            wins += 1
    assert wins >= 90


def _toy_encoder(rng):
    # 1 -> 6 -> 2 relu network; nonconvex in the input
    w0 = rng.normal(size=(6, 1)) * 3
    b0 = rng.normal(size=6)
    w1 = rng.normal(size=(2, 6))
    return Encoder([Layer(gc.parameter(w0), gc.parameter(b0), "relu"),
                    Layer(gc.parameter(w1), gc.parameter(np.zeros(2)), "none")])


def test_fare_1d_grid_search_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        phi = _toy_encoder(rng)
        org = snapshot_frozen(_toy_encoder(rng))
        x = np.array([float(rng.uniform(0.2, 0.8))])
        eps = 0.1
        grid = np.linspace(x[0] - eps, x[0] + eps, 10_001)[:, None]
        with gc.no_grad():
            gvals = fare_loss(phi, org, np.repeat(x[None], len(grid), 0), Tensor(grid)).data
        gmax = gvals.max()
        z, best = run_attack(lambda zt: fare_loss(phi, org, x, zt), x,
                             AttackConfig(epsilon=eps, n_iter=100, mode="apgd", random_start=True, seed=seed))
        assert feasible(z, x, eps)
        assert best.item() <= gmax + 1e-9 or abs(best.item() - gmax) <= 1e-6 * max(1.0, gmax)
        assert best.item() >= 0.95 * gmax


def test_project_linf_examples(rng):
    x = rng.uniform(0.2, 0.8, size=10)
    eps = 0.05
    z = np.clip(x + rng.uniform(-eps, eps, size=10), 0, 1)
    np.testing.assert_array_equal(project_linf(z, x, eps), z)
    np.testing.assert_allclose(project_linf(x + 10 * eps, x, eps, -np.inf, np.inf), x + eps)
    with pytest.raises(gc.ShapeError):
        project_linf(np.ones(3), np.ones(4), 0.1)


@given(unit, arrays(np.float64, 5, elements=st.floats(-3, 3)), st.floats(0, 0.5))
def test_project_idempotent_and_feasible(x, z, eps):
    p = project_linf(z, x, eps)
    assert np.array_equal(project_linf(p, x, eps), p)
    assert feasible(p, x, eps)


@given(unit, st.integers(0, 2**16), st.sampled_from(["pgd", "apgd"]))
def test_attack_feasibility_property(x, seed, mode):
    w = np.random.default_rng(seed).normal(size=5)
    loss = lambda z: gc.sum_(gc.exp(z * w) + gc.power(z, 2.0) * w, axis=-1)
    eps = Fraction(4, 255)
    z = run_attack(loss, x, AttackConfig(epsilon=eps, n_iter=7, mode=mode, random_start=True, seed=seed))[0]
    assert feasible(z, x, float(eps))


def test_budget_monotone(rng):
    loss = lambda z: gc.sum_(gc.exp(z * 2.0) * np.array([1.0, -1.0, 0.5]), axis=-1)
    x = rng.uniform(size=(20, 3))
    small = run_attack(loss, x, AttackConfig(epsilon=Fraction(2, 255), n_iter=20))[1]
    large = run_attack(loss, x, AttackConfig(epsilon=Fraction(4, 255), n_iter=20))[1]
    assert np.all(large >= small - 1e-12)


def test_deterministic_per_seed_and_order_independent(rng):
    loss = lambda z: gc.sum_(gc.exp(gc.power(z - 0.5, 2.0) * -10.0), axis=-1)
    x = rng.uniform(size=(6, 4))
    cfg = AttackConfig(epsilon=0.05, n_iter=10, random_start=True, seed=9)
    ids = np.arange(6)
    z1 = run_attack(loss, x, cfg, sample_ids=ids)[0]
    z2 = run_attack(loss, x, cfg, sample_ids=ids)[0]
    np.testing.assert_array_equal(z1, z2)
    perm = rng.permutation(6)
    z3 = run_attack(loss, x[perm], cfg, sample_ids=ids[perm])[0]
    np.testing.assert_array_equal(z3, z1[perm])


def test_non_finite_gradient_raises():
    loss = lambda z: gc.sum_(gc.power(z, 0.5), axis=-1)
    with pytest.raises(gc.NonFiniteError):
        run_attack(loss, np.zeros((1, 2)), AttackConfig(epsilon=0.01))


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ValueError):
        AttackConfig(n_iter=0)
    with pytest.raises(ValueError, match="accepted"):
        AttackConfig(mode="fgsm")
