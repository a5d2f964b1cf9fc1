"""Shadow training and gradient-ascent feature manipulation against a shadow ensemble."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .attribution import attribute
from .compensation import TopKConfig, compensation_share
from .dataset import Dataset
from .errors import ParameterError


@dataclass(frozen=True)
class AttackResult:
    data: Dataset
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ShadowEnsemble:
    models: list
    val: Dataset
    train_sets: list  # Z^(i) for each model, without the adversary's points
    z_ids: np.ndarray

    def __post_init__(self):
        if len(self.models) < 1:
            raise ParameterError("a shadow ensemble needs at least one model")

    def __len__(self):
        return len(self.models)

    def train_ids(self, i):
        return np.concatenate([self.train_sets[i].ids, self.z_ids])


@dataclass(frozen=True)
class AttackBudget:
    step_size: float = 0.01
    iterations: int = 10
    eps_inf: float | None = None  # None: iterations * step_size
    clip: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.step_size < 0:
            raise ParameterError("step_size must be >= 0")
        if self.eps_inf is not None and not self.eps_inf > 0:
            raise ParameterError("eps_inf must be > 0")

    @property
    def radius(self):
        return self.iterations * self.step_size if self.eps_inf is None else self.eps_inf


def train_shadow_ensemble(pool: Dataset, z: Dataset, m: int, subset_size: int, arch: M.Architecture,
                          tcfg: M.TrainConfig, seed, val_size=200, exclude_ids=None) -> ShadowEnsemble:
    """Train m shadow models, model i on Z^(i) + z with Z^(i) a random pool subset.

    The shadow validation set is drawn from the pool first and never used for
    shadow training.  ``exclude_ids`` (e.g. the target training ids) must not
    appear in the pool.
    """
    if m < 1:
        raise ParameterError("m must be >= 1")
    if exclude_ids is not None and np.isin(pool.ids, np.asarray(exclude_ids)).any():
        raise ParameterError("shadow pool overlaps the target training set")
    if np.isin(pool.ids, z.ids).any():
        raise ParameterError("shadow pool contains the adversary's own points")
    if val_size + subset_size > len(pool):
        raise ParameterError(f"pool of {len(pool)} too small for {val_size} validation + {subset_size} training points")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pool))
    val = pool.subset(np.sort(perm[:val_size]))
    rest = perm[val_size:]
    models, sets = [], []
    for _ in range(m):
        pick = np.sort(rng.choice(rest, size=subset_size, replace=False))
        zi = pool.subset(pick)
        models.append(M.train(zi.concat(z), arch, tcfg))
        sets.append(zi)
    return ShadowEnsemble(models, val, sets, z.ids.copy())


def shadow_share(z: Dataset, ens: ShadowEnsemble, k: int, method="graddot", config=None) -> float:
    """Shadow compensation share of ``z`` averaged over the ensemble (models are not retrained)."""
    return float(np.mean(per_model_shares(z, ens, k, method, config)))


def per_model_shares(z, ens, k, method="graddot", config=None):
    cfg = TopKConfig(k)
    out = []
    for mi, zi in zip(ens.models, ens.train_sets):
        tau = attribute(method, zi.concat(z), mi, ens.val, config=config)
        out.append(compensation_share(tau, z.ids, cfg).share)
    return out


def _val_grad_sums(ens):
    return [M.per_sample_grads(mi, ens.val).sum(axis=0) for mi in ens.models]


def surrogate_objective(z: Dataset, ens: ShadowEnsemble, k: int, _gsums=None) -> float:
    """Sum of Grad-Dot scores of z against the shadow validation set, normalized by m*k*|V0|."""
    gsums = _val_grad_sums(ens) if _gsums is None else _gsums
    total = 0.0
    for mi, G in zip(ens.models, gsums):
        total += -float(M.per_sample_grads(mi, z).sum(axis=0) @ G)
    return total / (len(ens) * k * len(ens.val))


def surrogate_gradient(z: Dataset, ens: ShadowEnsemble, k: int, _gsums=None) -> np.ndarray:
    """(n, dim) gradient of the surrogate objective with respect to z's features.

    d/dx <grad_theta loss(theta, x), G> is the derivative of grad_x loss along
    G in parameter space; taken as a central difference over theta.
    """
    gsums = _val_grad_sums(ens) if _gsums is None else _gsums
    out = np.zeros_like(z.X)
    for mi, G in zip(ens.models, gsums):
        nG = np.linalg.norm(G)
        if nG == 0:
            continue
        r = 1e-4 / nG
        out -= (M.grads_x(mi, z, mi.theta + r * G) - M.grads_x(mi, z, mi.theta - r * G)) / (2 * r)
    return out / (len(ens) * k * len(ens.val))


def shadow_attack(z: Dataset, ens: ShadowEnsemble, budget: AttackBudget, k: int) -> AttackResult:
    """Projected sign-gradient ascent on the surrogate, shadow models held fixed."""
    lo, hi = budget.clip
    if z.X.min() < lo or z.X.max() > hi:
        raise ParameterError("input features must lie inside the clip range")
    gsums = _val_grad_sums(ens)
    x0 = z.X
    X = x0.copy()
    trace = [surrogate_objective(z, ens, k, gsums)]
    for _ in range(budget.iterations):
        g = surrogate_gradient(z.with_features(X), ens, k, gsums)
        X = X + budget.step_size * np.sign(g)
        X = np.clip(X, x0 - budget.radius, x0 + budget.radius)
        X = np.clip(X, lo, hi)
        trace.append(surrogate_objective(z.with_features(X), ens, k, gsums))
    out = z.with_features(X)
    meta = {
        "attack": "shadow",
        "surrogate_trace": trace,
        "realized_linf": float(np.abs(X - x0).max()) if len(X) else 0.0,
        "budget": {"step_size": budget.step_size, "iterations": budget.iterations, "radius": budget.radius},
    }
    return AttackResult(out, [], meta)
