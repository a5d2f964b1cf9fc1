"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import itertools
import time
from fractions import Fraction
from statistics import median

import numpy as np
import pytest
from scipy.stats import pearsonr

from attribution_attacks import attribution as A
from attribution_attacks import model as M
from attribution_attacks import outlier as O
from attribution_attacks import pipeline as P
from attribution_attacks import theory as T
from attribution_attacks.compensation import TopKConfig, compensation_share, fraction_of_change
from attribution_attacks.config import desk_lr, desk_mlp
from attribution_attacks.dataset import synth_blobs

LINES = []
_RUNS = {}

SEEDS3 = (0, 1, 2)
SEEDS5 = (0, 1, 2, 3, 4)


def record(cid, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {cid}: {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


def run(kind, seed):
    key = (kind, seed)
    if key not in _RUNS:
        if kind == "simba":
            cfg = desk_mlp(seed=seed, run_id=f"simba-{seed}")
        else:
            cfg = desk_lr(seed=seed, attack=kind, run_id=f"{kind}-{seed}")
        _RUNS[key] = P.run_experiment(cfg)
    return _RUNS[key]


def _brute_share(values, ids, adv, k):
    hits = 0
    for v in range(values.shape[1]):
        taken = []
        for _ in range(k):
            best = None
            for i in range(values.shape[0]):
                if i in taken:
                    continue
                if best is None or values[i, v] > values[best, v] or (values[i, v] == values[best, v] and ids[i] < ids[best]):
                    best = i
            taken.append(best)
        hits += sum(ids[i] in adv for i in taken)
    return Fraction(hits, k * values.shape[1])


def test_c01_share_oracle():
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = 0
    for case in range(200):
        n, nv = int(rng.integers(20, 201)), int(rng.integers(1, 51))
        vals = rng.integers(-3, 4, size=(n, nv)).astype(float) if case % 2 else rng.standard_normal((n, nv))
        ids = rng.permutation(5 * n)[:n]
        adv = set(rng.choice(ids, size=int(rng.integers(1, n)), replace=False).tolist())
        k = (1, 5, 20)[case % 3]
        cm = A.ContributionMatrix(vals, ids, np.arange(nv), "if")
        bad += compensation_share(cm, adv, TopKConfig(k)).share_exact != _brute_share(vals, ids, adv, k)
    dt = time.perf_counter() - t
    record("C1 compensation share vs brute force", bad == 0 and dt < 10, f"{200 - bad}/200 exact, {dt:.1f}s (< 10s)")


def test_c02_fraction_of_change():
    rng = np.random.default_rng(2)
    ok = True
    for _ in range(300):
        n, nv = int(rng.integers(5, 60)), int(rng.integers(1, 40))
        a = A.ContributionMatrix(rng.standard_normal((n, nv)), np.arange(n), np.arange(nv), "if")
        b = A.ContributionMatrix(rng.standard_normal((n, nv)), np.arange(n), np.arange(nv), "if")
        ch = fraction_of_change(a, b, rng.choice(n, size=max(1, n // 4), replace=False), TopKConfig(int(rng.integers(1, n + 1))))
        ok &= ch.more + ch.tied + ch.fewer == 1
    none = run("none", 0)
    tied = float(none.change.tied)
    record("C2 fraction of change", ok and tied == 1.0 and none.ratio == 1.0,
           f"more+tied+fewer == 1 on 300 fuzz cases: {ok}; attack=none tied={tied}, ratio={none.ratio}")


def test_c03_shadow_direction():
    t = time.perf_counter()
    ratios = [run("shadow", s).ratio for s in SEEDS3]
    dt = time.perf_counter() - t
    med = median(ratios)
    record("C3 shadow attack ratio", med >= 2.0 and dt < 600,
           f"median {med:.3f} (>= 2.0) over seeds {SEEDS3}: {[round(r, 3) for r in ratios]}, {dt:.0f}s")


def test_c04_outlier_direction():
    t = time.perf_counter()
    zoo = [run("zoo", s).ratio for s in SEEDS3]
    simba = [run("simba", s).ratio for s in SEEDS3]
    dt = time.perf_counter() - t
    record("C4 outlier attack ratio", median(zoo) >= 2.0 and median(simba) >= 1.5 and dt < 900,
           f"ZOO LR median {median(zoo):.3f} (>= 2.0) {[round(r, 3) for r in zoo]}; "
           f"SimBA MLP median {median(simba):.3f} (>= 1.5) {[round(r, 3) for r in simba]}; {dt:.0f}s")


def test_c05_random_baseline():
    ratios = [run("random", s).ratio for s in SEEDS5]
    med = median(ratios)
    record("C5 random baseline neutrality", 0.5 <= med <= 1.5,
           f"median {med:.3f} in [0.5, 1.5] over 5 seeds: {[round(r, 3) for r in ratios]}")


def test_c06_white_box_dominance():
    pairs = [(run("fgsm", s).ratio, run("zoo", s).ratio) for s in SEEDS3]
    ok = all(f >= 0.8 * z for f, z in pairs)
    record("C6 FGSM >= ZOO - 20% relative", ok, "paired (fgsm, zoo): " + ", ".join(f"({f:.3f}, {z:.3f})" for f, z in pairs))


def test_c07_influence_scaling():
    t = time.perf_counter()
    rep = T.stability_experiment([200, 400, 800], perturb_mag=0.3, trials=20, seed=0)
    ctl = T.stability_experiment([200, 400, 800], perturb_mag=0.0, trials=3, seed=0)
    dt = time.perf_counter() - t
    worst = max(ctl.unchanged_delta + ctl.perturbed_delta)
    ok = -1.3 <= rep.slope_unchanged <= -0.7 and worst <= 1e-8 and dt < 300
    record("C7 influence stability O(1/n)", ok,
           f"slope {rep.slope_unchanged:.3f} in [-1.3, -0.7]; perturbed-point slope {rep.slope_perturbed:.3f}; "
           f"control max delta {worst:.1e} (<= 1e-8); {dt:.1f}s")


def test_c08_parameter_bound():
    margins = [T.parameter_shift_bound(500, perturb_mag=0.3, seed=s)["margin"] for s in range(20)]
    record("C8 parameter-shift bound", min(margins) >= 0, f"20 seeds at n=500, min margin {min(margins):.4f} (>= 0)")


def test_c09_attribution_oracles():
    # IF-CG vs dense inverse, 20 random small models
    rng = np.random.default_rng(9)
    errs = []
    for s in range(20):
        d = synth_blobs(30, 3, 4, 0.2, s)
        v = synth_blobs(6, 3, 4, 0.2, s + 100)
        arch = M.Architecture("lr", 4, 3, l2_reg=0.05)
        m = M.ModelParams(0.5 * rng.standard_normal(arch.n_params), arch)
        cg = A.influence_function(d, m, v, A.CGConfig(tol=1e-12)).values
        H = M.hessian(m, d)
        dense = -(M.per_sample_grads(m, d) @ np.linalg.inv(H) @ M.per_sample_grads(m, v).T)
        errs.append(np.linalg.norm(cg - dense) / np.linalg.norm(dense))
    # IF vs leave-one-out on n=100 regularized LR
    train, val = synth_blobs(100, 3, 4, 0.25, 3), synth_blobs(30, 3, 4, 0.25, 4)
    arch = M.Architecture("lr", 4, 3, l2_reg=0.01)
    m, _ = M.fit_minimizer(train, arch, tol=1e-10)
    tau = A.influence_function(train, m, val).values
    base = M.losses(m, val)
    loo = np.stack([M.losses(M.fit_minimizer(train.subset(np.delete(np.arange(100), j)), arch, 1e-10, init=m)[0], val) - base
                    for j in range(100)])
    r = pearsonr(tau.ravel(), -100 * loo.ravel())[0]
    # Shapley MC vs enumeration of all orderings, n=3
    tr3, v3 = synth_blobs(3, 3, 2, 0.2, 7), synth_blobs(6, 3, 2, 0.2, 8)
    a3 = M.Architecture("lr", 2, 3, l2_reg=0.01)
    tc = M.TrainConfig(epochs=5, lr=0.5)
    cache = {}

    def u(S):
        key = tuple(sorted(S))
        if key not in cache:
            mm = M.train(tr3.subset(np.array(key)), a3, tc) if key else M.init_params(a3, tc.seed)
            cache[key] = M.losses(mm, v3)
        return cache[key]

    perms = list(itertools.permutations(range(3)))
    exact = np.zeros((3, 6))
    for p in perms:
        for i, j in enumerate(p):
            exact[j] += (u(p[:i]) - u(p[: i + 1])) / len(perms)
    mc = A.data_shapley(tr3, a3, tc, v3, A.ShapleyConfig(permutations=600, truncation_tol=0.0, retrain_epochs=5, seed=1)).values
    shap_err = np.abs(mc - exact).max()
    # ZOO gradient vs analytic feature gradient
    d = synth_blobs(200, 4, 16, 0.25, 2)
    tm = M.train(d, M.Architecture("lr", 16, 4, l2_reg=1e-3), M.TrainConfig(epochs=60, lr=0.05, optimizer="adam"))
    z = d.subset(np.arange(0, 200, 10))
    g = O.zoo_gradient(O.BlackBoxQuery.from_model(tm), z.X, z.y, np.arange(16), 1e-4)
    ex = M.grads_x(tm, z)
    cos = min(float(a @ b / np.linalg.norm(a) / np.linalg.norm(b)) for a, b in zip(g, ex))
    ok = max(errs) <= 1e-4 and r >= 0.9 and shap_err <= 0.05 and cos >= 0.99
    record("C9 attribution oracles", ok,
           f"IF-CG rel err {max(errs):.1e} (<= 1e-4); IF-LOO pearson {r:.3f} (>= 0.9); "
           f"Shapley max err {shap_err:.4f} (<= 0.05); ZOO min cosine {cos:.5f} (>= 0.99)")


def test_c10_simba_invariant_and_purity(monkeypatch):
    res = run("simba", 0)
    traces = [r["loss_trace"] for r in res.attack["records"]]
    mono = all(b > a for tr in traces for a, b in zip(tr, tr[1:]))
    accepted = sum(len(tr) - 1 for tr in traces)
    # purity: attacks work from a plain probability function with gradient code disabled
    m0 = res.models["t0"]
    z = res.datasets["adversary_original"]
    q = O.BlackBoxQuery(lambda X, m=m0: M.predict_proba(m, X), z.dim)

    def forbidden(*a, **k):
        raise AssertionError("gradient access")

    for name in ("grads_x", "grad_x", "per_sample_grads", "mean_grad", "hessian", "hvp"):
        monkeypatch.setattr(M, name, forbidden)
    pure = True
    try:
        O.simba_attack(q, z, O.SimbaConfig(eps=0.1))
        O.zoo_attack(q, z, O.ZooConfig(eps=0.03))
    except AssertionError:
        pure = False
    typed = True
    for fn in (O.simba_attack, O.zoo_attack):
        try:
            fn(m0, z)
            typed = False
        except TypeError:
            pass
    record("C10 SimBA monotone + black-box purity", mono and pure and typed and accepted > 0,
           f"{accepted} accepted steps all strictly increasing: {mono}; no gradient access: {pure}; model objects rejected: {typed}")


def test_c11_determinism(tmp_path):
    same = []
    for name, cfg in (("shadow", desk_lr(attack="shadow", seed=5)), ("simba", desk_mlp(seed=5))):
        P.execute(cfg, tmp_path / name)
        res = P.reproduce(tmp_path / name, tmp_path / f"{name}-again")
        a = (tmp_path / name / "report.json").read_bytes()
        b = (tmp_path / f"{name}-again" / "report.json").read_bytes()
        same.append(res["identical"] and a == b)
    record("C11 manifest rerun byte-identical", all(same), f"shadow/LR and simba/MLP manifests reproduced identically: {same}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
