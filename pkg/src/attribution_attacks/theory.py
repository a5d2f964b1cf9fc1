"""Numerical checks of influence-score stability under a single-point perturbation.

Everything here runs on strongly convex regularized LR with few parameters,
so minimizers are computed to gradient norm 1e-8 and Hessians are inverted
densely.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .dataset import Dataset, synth_blobs
from .errors import ParameterError, TrainingError


@dataclass(frozen=True)
class TheoryConfig:
    dim: int = 5
    num_classes: int = 3
    spread: float = 0.25
    l2_reg: float = 0.05
    n_test: int = 20
    tol: float = 1e-8
    lipschitz_safety: float = 2.0

    def arch(self):
        return M.Architecture("lr", self.dim, self.num_classes, l2_reg=self.l2_reg)


@dataclass
class StabilityReport:
    ns: list
    perturb_mag: float
    trials: int
    seed: int
    unchanged_delta: list  # per n, median over trials of the max unchanged-point delta
    unchanged_common_delta: list
    perturbed_delta: list
    hinv_diff: list
    theta_diff: list
    raw: list = field(default_factory=list)
    slope_unchanged: float | None = None
    slope_unchanged_common: float | None = None
    slope_perturbed: float | None = None
    slope_hinv: float | None = None
    bound_margins: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def loglog_slope(ns, values):
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(ns) < 3:
        return None
    if np.any(values <= 0):
        return None
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def _trial_pool(max_n, cfg: TheoryConfig, seed):
    total = max_n + cfg.n_test
    d = synth_blobs(total, cfg.num_classes, cfg.dim, cfg.spread, seed)
    d = d.subset(np.random.default_rng(seed).permutation(total))
    test = d.subset(np.arange(max_n, total))
    return d, test


def _fit(d, arch, tol, n):
    try:
        return M.fit_minimizer(d, arch, tol=tol)
    except TrainingError as exc:
        raise TrainingError(f"n={n}: {exc}") from exc


def _perturb(d: Dataset, m: M.ModelParams, idx, mag):
    """Move the points at ``idx`` by mag * sign(dloss/dx), clipped to [0, 1]."""
    X = d.X.copy()
    if mag:
        g = M.grads_x(m, d.subset(idx))
        X[idx] = np.clip(X[idx] + mag * np.sign(g), 0.0, 1.0)
    return d.with_features(X)


def _influence(m, train, val, Hinv=None):
    H = M.hessian(m, train)
    Hinv = np.linalg.inv(H) if Hinv is None else Hinv
    return -(M.per_sample_grads(m, train) @ Hinv @ M.per_sample_grads(m, val).T), Hinv


def _max_grad_norm(arch, path, datasets):
    best = 0.0
    for theta in path:
        m = M.ModelParams(theta, arch)
        for d in datasets:
            best = max(best, float(np.linalg.norm(M.per_sample_grads(m, d), axis=1).max()))
    return best


def single_cell(n, cfg: TheoryConfig, perturb_mag, seed, n_perturbed=1, pool=None, common=None):
    """One (n, trial) cell: retrain after perturbing ``n_perturbed`` points and compare."""
    arch = cfg.arch()
    if pool is None:
        pool = _trial_pool(n, cfg, seed)
    data, test = pool
    d = data.subset(np.arange(n))
    j = np.arange(n_perturbed)
    m, path = _fit(d, arch, cfg.tol, n)
    d2 = _perturb(d, m, j, perturb_mag)
    m2, path2 = _fit(d2, arch, cfg.tol, n)
    tau, Hinv = _influence(m, d, test)
    tau2, Hinv2 = _influence(m2, d2, test)
    keep = np.ones(n, dtype=bool)
    keep[j] = False
    unchanged = float(np.abs(tau2[keep] - tau[keep]).max())
    # same max restricted to the points present at every n (nested prefixes)
    keep[(common or n):] = False
    unchanged_common = float(np.abs(tau2[keep] - tau[keep]).max())
    # perturbed points scored on the old model (old training set Hessian) vs the new one
    moved = d2.subset(j)
    g_old = M.per_sample_grads(m, moved)
    tau_moved_old = -(g_old @ Hinv @ M.per_sample_grads(m, test).T)
    perturbed = float(np.abs(tau2[j] - tau_moved_old).max())
    L = cfg.lipschitz_safety * _max_grad_norm(arch, path + path2, [d, d2])
    theta_diff = float(np.linalg.norm(m.theta - m2.theta))
    return {
        "n": n,
        "seed": seed,
        "unchanged": unchanged,
        "unchanged_common": unchanged_common,
        "perturbed": perturbed,
        "hinv_diff": float(np.linalg.norm(Hinv2 - Hinv, 2)),
        "hinv_norm": float(np.linalg.norm(Hinv, 2)),
        "theta_diff": theta_diff,
        "lipschitz": L,
        "bound_rhs": 4 * n_perturbed * L / (cfg.l2_reg * n),
    }


def stability_experiment(ns, perturb_mag=0.3, trials=20, seed=0, cfg: TheoryConfig = TheoryConfig(), n_perturbed=1) -> StabilityReport:
    if cfg.l2_reg <= 0:
        raise ParameterError("stability checks need l2_reg > 0")
    ns = sorted(int(n) for n in ns)
    raw = []
    for t in range(trials):
        pool = _trial_pool(ns[-1], cfg, seed + t)
        for n in ns:
            raw.append(single_cell(n, cfg, perturb_mag, seed + t, n_perturbed, pool, common=ns[0]))

    def med(key):
        return [float(np.median([r[key] for r in raw if r["n"] == n])) for n in ns]

    rep = StabilityReport(
        ns=ns,
        perturb_mag=perturb_mag,
        trials=trials,
        seed=seed,
        unchanged_delta=med("unchanged"),
        unchanged_common_delta=med("unchanged_common"),
        perturbed_delta=med("perturbed"),
        hinv_diff=med("hinv_diff"),
        theta_diff=med("theta_diff"),
        raw=raw,
        bound_margins=[r["bound_rhs"] - r["theta_diff"] for r in raw],
        config={**asdict(cfg), "n_perturbed": n_perturbed},
    )
    if perturb_mag > 0:
        rep.slope_unchanged = loglog_slope(ns, rep.unchanged_delta)
        rep.slope_unchanged_common = loglog_slope(ns, rep.unchanged_common_delta)
        rep.slope_perturbed = loglog_slope(ns, rep.perturbed_delta)
        rep.slope_hinv = loglog_slope(ns, rep.hinv_diff)
    return rep


def parameter_shift_bound(n, perturb_mag=0.3, seed=0, cfg: TheoryConfig = TheoryConfig()) -> dict:
    """||theta - theta'|| <= 4 L / (lambda n) with an empirical Lipschitz constant."""
    r = single_cell(n, cfg, perturb_mag, seed)
    return {"n": n, "seed": seed, "lhs": r["theta_diff"], "rhs": r["bound_rhs"], "margin": r["bound_rhs"] - r["theta_diff"], "lipschitz": r["lipschitz"], "lambda": cfg.l2_reg}


def hessian_inverse_bound(ns, perturb_mag=0.3, seed=0, trials=20, cfg: TheoryConfig = TheoryConfig()) -> dict:
    rep = stability_experiment(ns, perturb_mag, trials, seed, cfg)
    norms = [r["hinv_norm"] for r in rep.raw]
    return {
        "ns": rep.ns,
        "diff": rep.hinv_diff,
        "slope": rep.slope_hinv,
        "max_hinv_norm": max(norms),
        "inv_lambda": 1.0 / cfg.l2_reg,
    }
