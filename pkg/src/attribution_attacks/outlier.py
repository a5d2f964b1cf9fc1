"""Outlier Attack: loss-raising feature perturbations of the adversary's points.

ZOO and SimBA only see a :class:`BlackBoxQuery`; FGSM/PGD are white-box
reference attacks; ``random_perturb`` is the matched-budget baseline.
Labels and ids are never changed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .dataset import Dataset
from .errors import ParameterError
from .shadow import AttackResult

LOSS_FLOOR = 1e-12


class BlackBoxQuery:
    """Probability-only access to a classifier, with a query counter.

    ``fn`` maps an (n, dim) array to (n, C) class probabilities.  Each row
    counts as one query.
    """

    def __init__(self, fn, dim):
        self._fn = fn
        self.dim = dim
        self.count = 0

    @classmethod
    def from_model(cls, m: M.ModelParams):
        return cls(lambda X: M.predict_proba(m, X), m.arch.dim)

    def proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.count += len(X)
        return self._fn(X)

    def loss(self, X, y):
        p = self.proba(X)
        y = np.asarray(y)
        return -np.log(p[np.arange(len(y)), y] + LOSS_FLOOR)


def _require_query(q):
    if not isinstance(q, BlackBoxQuery):
        raise TypeError("black-box attacks accept only a BlackBoxQuery")


def _check_unit(z: Dataset):
    if len(z) and (z.X.min() < 0.0 or z.X.max() > 1.0):
        raise ParameterError("features must lie in [0, 1]")


@dataclass(frozen=True)
class ZooConfig:
    eps: float = 0.03
    h: float = 1e-4
    max_coords: int = 128
    iterations: int = 1
    step_size: float | None = None  # None: eps
    seed: int = 0

    def __post_init__(self):
        if not self.h > 0:
            raise ParameterError("h must be > 0")
        if self.eps < 0:
            raise ParameterError("eps must be >= 0")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")


def zoo_gradient(q: BlackBoxQuery, X, y, coords, h):
    """Symmetric difference quotient of the queried loss along each coordinate in ``coords``."""
    _require_query(q)
    G = np.zeros_like(X)
    for c in coords:
        E = np.zeros_like(X)
        E[:, c] = h
        G[:, c] = (q.loss(X + E, y) - q.loss(X - E, y)) / (2 * h)
    return G


def zoo_attack(q: BlackBoxQuery, z: Dataset, cfg: ZooConfig = ZooConfig(), record_loss=True) -> AttackResult:
    """x' = x + step * sign(g_hat), projected on the eps ball and [0, 1]."""
    _require_query(q)
    _check_unit(z)
    rng = np.random.default_rng(cfg.seed)
    step = cfg.eps if cfg.step_size is None else cfg.step_size
    x0, y = z.X, z.y
    X = x0.copy()
    before = q.loss(x0, y) if record_loss else None
    attack_queries = 0
    for _ in range(cfg.iterations):
        if z.dim <= cfg.max_coords:
            coords = np.arange(z.dim)
        else:
            coords = np.sort(rng.choice(z.dim, size=cfg.max_coords, replace=False))
        G = zoo_gradient(q, X, y, coords, cfg.h)
        attack_queries += 2 * len(coords)
        X = np.clip(X + step * np.sign(G), x0 - cfg.eps, x0 + cfg.eps)
        X = np.clip(X, 0.0, 1.0)
    after = q.loss(X, y) if record_loss else None
    records = []
    for i in range(len(z)):
        rec = {"id": int(z.ids[i]), "queries": attack_queries, "linf": float(np.abs(X[i] - x0[i]).max())}
        if record_loss:
            rec["loss_before"] = float(before[i])
            rec["loss_after"] = float(after[i])
        records.append(rec)
    meta = {"attack": "zoo", "eps": cfg.eps, "h": cfg.h, "iterations": cfg.iterations, "realized_linf": _linf(X, x0)}
    return AttackResult(z.with_features(X), records, meta)


@dataclass(frozen=True)
class SimbaConfig:
    eps: float = 0.1
    max_queries: int | None = None  # per point; None: 1 + 2 * dim
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ParameterError("eps must be >= 0")
        if self.max_queries is not None and self.max_queries < 0:
            raise ParameterError("max_queries must be >= 0")


def simba_attack(q: BlackBoxQuery, z: Dataset, cfg: SimbaConfig = SimbaConfig()) -> AttackResult:
    """Pixel-basis SimBA: visit coordinates in a random order, try +eps then -eps,
    keep a change only if the queried loss strictly increases."""
    _require_query(q)
    _check_unit(z)
    n, dim = z.X.shape
    budget = 1 + 2 * dim if cfg.max_queries is None else cfg.max_queries
    rng = np.random.default_rng(cfg.seed)
    perms = np.stack([rng.permutation(dim) for _ in range(n)]) if n else np.zeros((0, dim), dtype=int)
    X = z.X.copy()
    used = np.zeros(n, dtype=np.int64)
    traces = [[] for _ in range(n)]
    if budget >= 1 and n:
        cur = q.loss(X, z.y)
        used += 1
        for i in range(n):
            traces[i].append(float(cur[i]))
        rows = np.arange(n)
        for t in range(dim):
            c = perms[:, t]
            pending = np.ones(n, dtype=bool)
            for sign in (1.0, -1.0):
                cand_val = np.clip(X[rows, c] + sign * cfg.eps, 0.0, 1.0)
                ask = pending & (cand_val != X[rows, c]) & (used < budget)
                if not ask.any():
                    continue
                idx = np.flatnonzero(ask)
                cand = X[idx].copy()
                cand[np.arange(len(idx)), c[idx]] = cand_val[idx]
                new = q.loss(cand, z.y[idx])
                used[idx] += 1
                win = new > cur[idx]
                acc = idx[win]
                X[acc] = cand[win]
                cur[acc] = new[win]
                pending[acc] = False
                for i, val in zip(acc, new[win]):
                    traces[i].append(float(val))
            if not (used < budget).any():
                break
    records = [
        {
            "id": int(z.ids[i]),
            "queries": int(used[i]),
            "loss_before": traces[i][0] if traces[i] else None,
            "loss_after": traces[i][-1] if traces[i] else None,
            "accepted": len(traces[i]) - 1 if traces[i] else 0,
            "loss_trace": traces[i],
            "linf": float(np.abs(X[i] - z.X[i]).max()),
        }
        for i in range(n)
    ]
    meta = {"attack": "simba", "eps": cfg.eps, "max_queries": budget, "realized_linf": _linf(X, z.X)}
    return AttackResult(z.with_features(X), records, meta)


def random_perturb(z: Dataset, eps: float, seed, kind="sign") -> AttackResult:
    """Matched-budget baseline: each coordinate moves by +-eps (``kind="sign"``)
    or by U(-eps, eps) (``kind="uniform"``), then clipped to [0, 1]."""
    if eps < 0:
        raise ParameterError("eps must be >= 0")
    rng = np.random.default_rng(seed)
    if kind == "sign":
        delta = eps * rng.choice([-1.0, 1.0], size=z.X.shape)
    elif kind == "uniform":
        delta = rng.uniform(-eps, eps, size=z.X.shape)
    else:
        raise ParameterError(f"unknown random perturbation kind {kind!r}")
    X = np.clip(z.X + delta, 0.0, 1.0)
    return AttackResult(z.with_features(X), [], {"attack": "random", "eps": eps, "kind": kind, "realized_linf": _linf(X, z.X)})


def fgsm_attack(m: M.ModelParams, z: Dataset, eps: float) -> AttackResult:
    res = pgd_attack(m, z, eps, steps=1, step_size=eps)
    return AttackResult(res.data, res.records, {**res.meta, "attack": "fgsm"})


def pgd_attack(m: M.ModelParams, z: Dataset, eps: float, steps: int = 10, step_size: float | None = None) -> AttackResult:
    if eps < 0 or steps < 1:
        raise ParameterError("need eps >= 0 and steps >= 1")
    step = eps / 4 if step_size is None else step_size
    x0 = z.X
    X = x0.copy()
    before = M.losses(m, z)
    for _ in range(steps):
        g = M.grads_x(m, (X, z.y))
        X = np.clip(np.clip(X + step * np.sign(g), x0 - eps, x0 + eps), 0.0, 1.0)
    out = z.with_features(X)
    after = M.losses(m, out)
    records = [{"id": int(i), "loss_before": float(b), "loss_after": float(a)} for i, b, a in zip(z.ids, before, after)]
    return AttackResult(out, records, {"attack": "pgd", "eps": eps, "steps": steps, "step_size": step, "realized_linf": _linf(X, x0)})


def _linf(X, x0):
    return float(np.abs(X - x0).max()) if X.size else 0.0
