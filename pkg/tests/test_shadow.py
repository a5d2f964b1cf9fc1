import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attribution_attacks import model as M
from attribution_attacks import shadow as S
from attribution_attacks.attribution import grad_dot
from attribution_attacks.dataset import split_contribution, SplitSizes, synth_blobs
from attribution_attacks.errors import ParameterError

ARCH = M.Architecture("lr", 4, 3, l2_reg=0.01)
TCFG = M.TrainConfig(epochs=30, lr=0.1, optimizer="adam")


@pytest.fixture(scope="module")
def setup():
    d = synth_blobs(400, 3, 4, 0.2, 11)
    sp = split_contribution(d, SplitSizes(100, 10, 8, 20, 20), 3)
    ens = S.train_shadow_ensemble(sp.pool, sp.z1_adversary_source, 3, 80, ARCH, TCFG, seed=0, val_size=30,
                                  exclude_ids=sp.z1_benign.ids)
    return sp, ens


def test_ensemble_shape_and_disjointness(setup):
    sp, ens = setup
    assert len(ens) == 3 and len(ens.val) == 30
    for zi in ens.train_sets:
        assert len(zi) == 80
        assert not np.isin(zi.ids, ens.val.ids).any()
        assert not np.isin(zi.ids, sp.z1_benign.ids).any()
    assert np.array_equal(ens.train_ids(0)[-8:], sp.z1_adversary_source.ids)


def test_ensemble_errors(setup):
    sp, _ = setup
    z = sp.z1_adversary_source
    with pytest.raises(ParameterError):
        S.train_shadow_ensemble(sp.pool, z, 0, 10, ARCH, TCFG, 0, 10)
    with pytest.raises(ParameterError):
        S.train_shadow_ensemble(sp.pool.concat(sp.z0), z, 1, 10, ARCH, TCFG, 0, 10, exclude_ids=sp.z0.ids)
    with pytest.raises(ParameterError):
        S.train_shadow_ensemble(sp.pool.concat(z), z, 1, 10, ARCH, TCFG, 0, 10)
    with pytest.raises(ParameterError):
        S.train_shadow_ensemble(sp.pool, z, 1, len(sp.pool), ARCH, TCFG, 0, 10)


def test_surrogate_equals_graddot_sum(setup):
    _, ens = setup
    z = setup[0].z1_adversary_source
    k = 5
    want = 0.0
    for mi in ens.models:
        want += grad_dot(z, mi, ens.val).values.sum()
    want /= len(ens) * k * len(ens.val)
    assert S.surrogate_objective(z, ens, k) == pytest.approx(want, rel=1e-10)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000))
def test_surrogate_gradient_finite_differences(setup, seed):
    sp, ens = setup
    z = sp.z1_adversary_source
    g = S.surrogate_gradient(z, ens, 5)
    rng = np.random.default_rng(seed)
    i, c = int(rng.integers(len(z))), int(rng.integers(z.dim))
    h = 1e-5
    Xp, Xm = z.X.copy(), z.X.copy()
    Xp[i, c] += h
    Xm[i, c] -= h
    fd = (S.surrogate_objective(z.with_features(Xp), ens, 5) - S.surrogate_objective(z.with_features(Xm), ens, 5)) / (2 * h)
    assert g[i, c] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_attack_contract(setup):
    sp, ens = setup
    z = sp.z1_adversary_source
    budget = S.AttackBudget(0.02, 5)
    before = [m.theta.copy() for m in ens.models]
    res = S.shadow_attack(z, ens, budget, 5)
    out = res.data
    assert np.abs(out.X - z.X).max() <= budget.radius + 1e-12
    assert out.X.min() >= 0 and out.X.max() <= 1
    assert np.array_equal(out.ids, z.ids) and np.array_equal(out.y, z.y)
    trace = res.meta["surrogate_trace"]
    assert len(trace) == 6 and trace[-1] > trace[0]
    assert all(np.array_equal(a, m.theta) for a, m in zip(before, ens.models))
    assert S.shadow_share(out, ens, 5) >= S.shadow_share(z, ens, 5)


def test_budget_validation_and_radius():
    assert S.AttackBudget(0.01, 10).radius == pytest.approx(0.1)
    assert S.AttackBudget(0.01, 10, eps_inf=0.05).radius == 0.05
    with pytest.raises(ParameterError):
        S.AttackBudget(0.01, 0)
    with pytest.raises(ParameterError):
        S.AttackBudget(-0.1, 1)


def test_zero_step_is_identity(setup):
    sp, ens = setup
    z = sp.z1_adversary_source
    res = S.shadow_attack(z, ens, S.AttackBudget(0.0, 2, eps_inf=0.1), 5)
    assert np.array_equal(res.data.X, z.X)


def test_unit_range_required(setup):
    sp, ens = setup
    z = sp.z1_adversary_source
    with pytest.raises(ParameterError):
        S.shadow_attack(z.with_features(z.X + 2.0), ens, S.AttackBudget(), 5)
