"""Training-data attribution: influence functions, Grad-Dot, TRAK and Data Shapley.

All methods return a :class:`ContributionMatrix` with one row per training
point and one column per validation point.  Scores follow the usual
influence-function sign, ``-grad(test)^T H^-1 grad(train)``; Grad-Dot and TRAK
carry the same leading minus sign.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .dataset import Dataset
from .errors import DimensionError, NumericalError, ParameterError

METHODS = ("if", "graddot", "trak", "shapley")


@dataclass(frozen=True, eq=False)
class ContributionMatrix:
    values: np.ndarray
    train_ids: np.ndarray
    val_ids: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)
    higher_is_top: bool = True

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        train_ids = np.asarray(self.train_ids, dtype=np.int64)
        val_ids = np.asarray(self.val_ids, dtype=np.int64)
        if values.shape != (len(train_ids), len(val_ids)):
            raise DimensionError(f"values {values.shape} vs ids ({len(train_ids)}, {len(val_ids)})")
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"{self.method} produced non-finite scores")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "train_ids", train_ids)
        object.__setattr__(self, "val_ids", val_ids)

    @property
    def shape(self):
        return self.values.shape


def model_hash(m: M.ModelParams) -> str:
    h = hashlib.sha256(m.theta.tobytes())
    h.update(json.dumps(m.arch.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def save_matrix(cm: ContributionMatrix, path):
    """Write ``<path>.npy`` plus a ``<path>.json`` metadata sidecar."""
    path = str(path)
    np.save(path + ".npy", cm.values)
    side = {
        "method": cm.method,
        "train_ids": cm.train_ids.tolist(),
        "val_ids": cm.val_ids.tolist(),
        "higher_is_top": cm.higher_is_top,
        "meta": cm.meta,
    }
    with open(path + ".json", "w") as f:
        json.dump(side, f, indent=1, sort_keys=True, default=_jsonable)


def load_matrix(path) -> ContributionMatrix:
    path = str(path)
    with open(path + ".json") as f:
        side = json.load(f)
    return ContributionMatrix(np.load(path + ".npy"), side["train_ids"], side["val_ids"], side["method"], side["meta"], side["higher_is_top"])


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------- influence


@dataclass(frozen=True)
class CGConfig:
    damping: float | None = None  # None: 0 for regularized LR, 0.01 otherwise
    max_iter: int = 500
    tol: float = 1e-10
    dense_cap: int = 4096  # materialize H when the parameter count is at most this

    def __post_init__(self):
        if not self.tol > 0:
            raise ParameterError("CG tolerance must be > 0")
        if self.damping is not None and self.damping < 0:
            raise ParameterError("damping must be >= 0")

    def resolve_damping(self, arch):
        if self.damping is not None:
            return self.damping
        return 0.0 if arch.kind == "lr" and arch.l2_reg > 0 else 0.01


def conjugate_gradient(matvec, B, tol=1e-10, max_iter=500):
    """Solve A X = B column by column (vectorized) for symmetric A.

    ``tol`` is relative to each column's right-hand-side norm.  Columns that
    hit non-positive curvature stop there and are flagged.
    Returns (X, residual_norms, iterations, converged, breakdown).
    """
    B = np.asarray(B, dtype=np.float64)
    X = np.zeros_like(B)
    R = B.copy()
    P = R.copy()
    rs = (R * R).sum(axis=0)
    bnorm = np.sqrt(rs)
    target = tol * np.maximum(bnorm, 1e-300)
    active = np.sqrt(rs) > target
    breakdown = np.zeros(B.shape[1], dtype=bool)
    iters = np.zeros(B.shape[1], dtype=np.int64)
    for _ in range(max_iter):
        if not active.any():
            break
        cols = np.flatnonzero(active)
        AP = matvec(P[:, cols])
        pap = (P[:, cols] * AP).sum(axis=0)
        bad = ~(pap > 0)
        if bad.any():
            breakdown[cols[bad]] = True
            active[cols[bad]] = False
            keep = ~bad
            cols, AP, pap = cols[keep], AP[:, keep], pap[keep]
            if not len(cols):
                break
        alpha = rs[cols] / pap
        X[:, cols] += alpha * P[:, cols]
        R[:, cols] -= alpha * AP
        rs_new = (R[:, cols] ** 2).sum(axis=0)
        P[:, cols] = R[:, cols] + (rs_new / rs[cols]) * P[:, cols]
        rs[cols] = rs_new
        iters[cols] += 1
        active[cols] = np.sqrt(rs_new) > target[cols]
    res = np.sqrt(rs)
    return X, res, iters, res <= target, breakdown


def _hessian_operator(m, train, damping, dense_cap):
    p = m.theta.size
    if p <= dense_cap:
        H = M.hessian(m, train) + damping * np.eye(p)
        return lambda V: H @ V
    def op(V):
        return np.column_stack([M.hvp(m, train, v) + damping * v for v in V.T])
    return op


def influence_function(train: Dataset, m: M.ModelParams, val: Dataset, cfg: CGConfig = CGConfig()) -> ContributionMatrix:
    damping = cfg.resolve_damping(m.arch)
    G_train = M.per_sample_grads(m, train)
    G_val = M.per_sample_grads(m, val)
    op = _hessian_operator(m, train, damping, cfg.dense_cap)
    S, res, iters, conv, brk = conjugate_gradient(op, G_val.T, cfg.tol, cfg.max_iter)
    finite = np.all(np.isfinite(S), axis=0)
    if not finite.all():
        raise NumericalError(f"CG produced non-finite solution for validation id {int(val.ids[np.argmin(finite)])}")
    values = -(G_train @ S)
    meta = {
        "damping": damping,
        "cg": {"max_iter": cfg.max_iter, "tol": cfg.tol},
        "max_iteration_flag": bool((~conv & ~brk).any()),
        "breakdown_val_ids": val.ids[brk].tolist(),
        "max_relative_residual": float(np.max(res / np.maximum(np.linalg.norm(G_val, axis=1), 1e-300))),
        "model": model_hash(m),
    }
    return ContributionMatrix(values, train.ids, val.ids, "if", meta)


def influence_dense(train: Dataset, m: M.ModelParams, val: Dataset, damping=0.0) -> np.ndarray:
    """Explicit-inverse influence scores; only for small parameter counts."""
    H = M.hessian(m, train) + damping * np.eye(m.theta.size)
    return -(M.per_sample_grads(m, train) @ np.linalg.solve(H, M.per_sample_grads(m, val).T))


# ---------------------------------------------------------------- grad-dot


def grad_dot(train: Dataset, m: M.ModelParams, val: Dataset) -> ContributionMatrix:
    values = -(M.per_sample_grads(m, train) @ M.per_sample_grads(m, val).T)
    return ContributionMatrix(values, train.ids, val.ids, "graddot", {"model": model_hash(m)})


# ---------------------------------------------------------------- TRAK


@dataclass(frozen=True)
class TrakConfig:
    k_proj: int | None = 512  # None: identity projection (no compression)
    seed: int = 0
    ridge: float | None = None  # None: 1e-6 * trace(Phi^T Phi) / k
    ensemble: int = 1
    subset_fraction: float = 0.5
    max_k: int = 8192

    def __post_init__(self):
        if self.k_proj is not None and not 1 <= self.k_proj <= self.max_k:
            raise ParameterError(f"k_proj must lie in [1, {self.max_k}]")
        if self.ridge is not None and self.ridge < 0:
            raise ParameterError("ridge must be >= 0")
        if self.ensemble < 1:
            raise ParameterError("ensemble must be >= 1")


def margin_grads(m: M.ModelParams, d: Dataset) -> np.ndarray:
    """Per-point gradients of f = log p_y - log(1 - p_y) with respect to theta."""
    net = m.arch.build()
    z, cache = net.forward(m.theta, d.X)
    p = M.softmax(z)
    rows = np.arange(len(d))
    py = p[rows, d.y]
    q = p / np.maximum(1.0 - py, 1e-300)[:, None]
    q[rows, d.y] = 0.0
    dz = -q
    dz[rows, d.y] += 1.0
    g, _ = net.backward(m.theta, cache, dz, per_sample=True)
    return g


def projection_matrix(p, k, seed):
    return np.random.default_rng(seed).standard_normal((p, k))


def _trak_single(train, m, val, cfg):
    Gt = margin_grads(m, train)
    Gv = margin_grads(m, val)
    if cfg.k_proj is None:
        Phi, phi_val = Gt, Gv
    else:
        P = projection_matrix(Gt.shape[1], cfg.k_proj, cfg.seed)
        Phi, phi_val = Gt @ P, Gv @ P
    K = Phi.T @ Phi
    k = K.shape[0]
    ridge = 1e-6 * np.trace(K) / k if cfg.ridge is None else cfg.ridge
    K = K + ridge * np.eye(k)
    if ridge == 0 and np.linalg.matrix_rank(K) < k:
        raise NumericalError("Phi^T Phi is singular; use a positive ridge")
    try:
        sol = np.linalg.solve(K, phi_val.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Phi^T Phi is singular ({exc}); use a positive ridge") from exc
    p_star = M.predict_proba(m, train.X)[np.arange(len(train)), train.y]
    return -(1.0 - p_star)[:, None] * (Phi @ sol), ridge


def trak(train: Dataset, m, val: Dataset, cfg: TrakConfig = TrakConfig()) -> ContributionMatrix:
    """Naive TRAK.  ``m`` is one model or a list of models to ensemble."""
    models = m if isinstance(m, (list, tuple)) else [m]
    scores, ridges = [], []
    for mi in models:
        s, r = _trak_single(train, mi, val, cfg)
        scores.append(s)
        ridges.append(r)
    meta = {"k_proj": cfg.k_proj, "seed": cfg.seed, "ridge": ridges, "models": [model_hash(x) for x in models]}
    return ContributionMatrix(np.mean(scores, axis=0), train.ids, val.ids, "trak", meta)


def trak_ensemble(train: Dataset, arch: M.Architecture, tcfg: M.TrainConfig, val: Dataset, cfg: TrakConfig) -> ContributionMatrix:
    """TRAK averaged over ``cfg.ensemble`` models, each trained on a random subset."""
    rng = np.random.default_rng(cfg.seed)
    size = max(1, int(round(cfg.subset_fraction * len(train))))
    models = []
    for i in range(cfg.ensemble):
        idx = np.sort(rng.choice(len(train), size=size, replace=False))
        models.append(M.train(train.subset(idx), arch, M.TrainConfig(**{**tcfg.to_dict(), "seed": tcfg.seed + i})))
    return trak(train, models, val, cfg)


# ---------------------------------------------------------------- Data Shapley


@dataclass(frozen=True)
class ShapleyConfig:
    permutations: int = 100
    truncation_tol: float = 1e-3
    truncation_patience: int = 5
    retrain_epochs: int = 5
    seed: int = 0
    max_retrains: int | None = None
    antithetic: bool = False

    def __post_init__(self):
        if self.permutations < 1:
            raise ParameterError("permutations must be >= 1")


class _SubsetUtility:
    """Validation losses of the model trained on a subset, memoized by subset."""

    def __init__(self, train, arch, tcfg, val, budget=None):
        self.train, self.arch, self.val = train, arch, val
        self.tcfg = tcfg
        self.cache = {}
        self.budget = budget
        self.retrains = 0
        self.empty = M.losses(M.init_params(arch, tcfg.seed), val)

    def __call__(self, members):
        if not members:
            return self.empty
        key = tuple(sorted(members))
        hit = self.cache.get(key)
        if hit is None:
            if self.budget is not None and self.retrains >= self.budget:
                raise _BudgetExhausted
            self.retrains += 1
            mdl = M.train(self.train.subset(np.array(key)), self.arch, self.tcfg)
            hit = self.cache[key] = M.losses(mdl, self.val)
        return hit


class _BudgetExhausted(Exception):
    pass


def data_shapley(train: Dataset, arch: M.Architecture, tcfg: M.TrainConfig, val: Dataset, cfg: ShapleyConfig = ShapleyConfig()) -> ContributionMatrix:
    """Truncated Monte-Carlo permutation estimate of Data Shapley.

    Entry (j, v) averages loss_v(S) - loss_v(S + {j}) over sampled
    permutations, S being the points preceding j.
    """
    n = len(train)
    if cfg.max_retrains is not None and cfg.max_retrains < n:
        raise ParameterError(f"retrain budget {cfg.max_retrains} cannot cover one permutation of {n} points")
    sub_cfg = M.TrainConfig(**{**tcfg.to_dict(), "epochs": cfg.retrain_epochs})
    util = _SubsetUtility(train, arch, sub_cfg, val, cfg.max_retrains)
    rng = np.random.default_rng(cfg.seed)
    total = np.zeros((n, len(val)))
    done = 0
    truncated = 0
    try:
        while done < cfg.permutations:
            perm = rng.permutation(n)
            batch = [perm, perm[::-1]] if cfg.antithetic else [perm]
            for order in batch:
                if done >= cfg.permutations:
                    break
                contrib = np.zeros((n, len(val)))
                prev = util(())
                members = []
                small = 0
                for j in order:
                    members.append(int(j))
                    cur = util(members)
                    delta = prev - cur
                    contrib[j] = delta
                    prev = cur
                    small = small + 1 if np.max(np.abs(delta)) < cfg.truncation_tol else 0
                    if small >= cfg.truncation_patience:
                        truncated += 1
                        break
                total += contrib
                done += 1
    except _BudgetExhausted:
        if done == 0:
            raise ParameterError("retrain budget exhausted before one full permutation") from None
    meta = {"permutations": done, "truncated": truncated, "retrains": util.retrains, "retrain_epochs": cfg.retrain_epochs, "seed": cfg.seed}
    return ContributionMatrix(total / done, train.ids, val.ids, "shapley", meta)


def exact_shapley(train: Dataset, arch: M.Architecture, tcfg: M.TrainConfig, val: Dataset, retrain_epochs=5) -> ContributionMatrix:
    """Exact Shapley values by the subset-weighted sum (n <= 8)."""
    n = len(train)
    if n > 8:
        raise ParameterError("exact Shapley is limited to n <= 8")
    sub_cfg = M.TrainConfig(**{**tcfg.to_dict(), "epochs": retrain_epochs})
    util = _SubsetUtility(train, arch, sub_cfg, val)
    values = np.zeros((n, len(val)))
    for j in range(n):
        others = [i for i in range(n) if i != j]
        for r in range(n):
            w = 1.0 / (n * math.comb(n - 1, r))
            for S in itertools.combinations(others, r):
                values[j] += w * (util(S) - util((*S, j)))
    return ContributionMatrix(values, train.ids, val.ids, "shapley", {"exact": True})


# ---------------------------------------------------------------- dispatch


def attribute(method, train, m, val, arch=None, tcfg=None, config=None) -> ContributionMatrix:
    if method == "if":
        return influence_function(train, m, val, config or CGConfig())
    if method == "graddot":
        return grad_dot(train, m, val)
    if method == "trak":
        return trak(train, m, val, config or TrakConfig())
    if method == "shapley":
        return data_shapley(train, arch or m.arch, tcfg, val, config or ShapleyConfig())
    raise ParameterError(f"unknown attribution method {method!r}")


def config_dict(cfg):
    return asdict(cfg) if cfg is not None else None
