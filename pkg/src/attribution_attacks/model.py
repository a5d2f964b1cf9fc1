"""Classifiers, the deterministic training algorithm and their derivative surface.

Per-point loss is cross-entropy plus ``l2_reg / 2 * ||theta||^2``; the
empirical objective is the mean per-point loss, so its Hessian is the mean
per-point Hessian plus ``l2_reg * I``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import DataPoint, Dataset
from .errors import DimensionError, ParameterError, TrainingError
from .networks import ConvNet, LinearNet, MLPNet, _log_softmax, softmax

MODEL_FORMAT_VERSION = 1
KINDS = ("lr", "mlp", "cnn")


@dataclass(frozen=True)
class Architecture:
    kind: str
    dim: int
    num_classes: int
    hidden: tuple = (10, 10, 10, 10, 10)
    filters: tuple = (8, 16)
    dense: int = 32
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown architecture kind {self.kind!r}")
        if self.l2_reg < 0:
            raise ParameterError("l2_reg must be >= 0")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "filters", tuple(self.filters))

    def build(self):
        return _build(self)

    @property
    def n_params(self):
        return self.build().n_params

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_NET_CACHE: dict = {}


def _build(arch):
    net = _NET_CACHE.get(arch)
    if net is None:
        if arch.kind == "lr":
            net = LinearNet(arch.dim, arch.num_classes)
        elif arch.kind == "mlp":
            net = MLPNet(arch.dim, arch.num_classes, arch.hidden)
        else:
            net = ConvNet(arch.dim, arch.num_classes, arch.filters, arch.dense)
        _NET_CACHE[arch] = net
    return net


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    optimizer: str = "sgd"
    batch_size: int | None = None  # None means full batch
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if not self.lr > 0:
            raise ParameterError("learning rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ModelParams:
    theta: np.ndarray
    arch: Architecture
    train_seed: int = 0
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.arch.n_params:
            raise DimensionError(f"theta has {theta.size} entries, architecture needs {self.arch.n_params}")
        if not np.all(np.isfinite(theta)):
            raise ParameterError("theta has non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def replace_theta(self, theta):
        return ModelParams(theta, self.arch, self.train_seed)


def _as_xy(data, dim):
    if isinstance(data, Dataset):
        X, y = data.X, data.y
    elif isinstance(data, DataPoint):
        X, y = data.features[None, :], np.array([data.label])
    else:
        X, y = data
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.shape[1] != dim:
        raise DimensionError(f"feature dimension {X.shape[1]} != model dimension {dim}")
    return X, y


def _ce(z, y):
    return -_log_softmax(z)[np.arange(len(y)), y]


def _reg(m, theta=None):
    theta = m.theta if theta is None else theta
    return 0.5 * m.arch.l2_reg * float(theta @ theta)


def logits(m: ModelParams, X):
    z, _ = m.arch.build().forward(m.theta, np.atleast_2d(X))
    return z


def losses(m: ModelParams, data) -> np.ndarray:
    """Per-point losses for a Dataset, a DataPoint or an (X, y) pair."""
    X, y = _as_xy(data, m.arch.dim)
    return _ce(logits(m, X), y) + _reg(m)


def loss(m: ModelParams, z) -> float:
    return float(losses(m, z)[0])


def objective(m: ModelParams, data) -> float:
    return float(losses(m, data).mean())


def _dlogits(m, X, y, weights=None):
    net = m.arch.build()
    z, cache = net.forward(m.theta, X)
    dz = softmax(z)
    dz[np.arange(len(y)), y] -= 1.0
    if weights is not None:
        dz = dz * weights[:, None]
    return net, cache, dz


def per_sample_grads(m: ModelParams, data) -> np.ndarray:
    """(n, p) matrix of per-point parameter gradients (regularizer included)."""
    X, y = _as_xy(data, m.arch.dim)
    net, cache, dz = _dlogits(m, X, y)
    g, _ = net.backward(m.theta, cache, dz, per_sample=True)
    if m.arch.l2_reg:
        g = g + m.arch.l2_reg * m.theta
    return g


def grad_theta(m: ModelParams, z) -> np.ndarray:
    return per_sample_grads(m, z)[0]


def mean_grad(m: ModelParams, data, theta=None) -> np.ndarray:
    X, y = _as_xy(data, m.arch.dim)
    if theta is not None:
        m = m.replace_theta(theta)
    net, cache, dz = _dlogits(m, X, y, np.full(len(y), 1.0 / len(y)))
    g, _ = net.backward(m.theta, cache, dz)
    return g + m.arch.l2_reg * m.theta


def grads_x(m: ModelParams, data, theta=None) -> np.ndarray:
    """(n, dim) gradients of each point's loss with respect to its own features."""
    X, y = _as_xy(data, m.arch.dim)
    if theta is not None:
        m = m.replace_theta(theta)
    net, cache, dz = _dlogits(m, X, y)
    _, gx = net.backward(m.theta, cache, dz, need_x=True)
    return gx


def grad_x(m: ModelParams, z) -> np.ndarray:
    return grads_x(m, z)[0]


def predict_proba(m: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != m.arch.dim:
        raise DimensionError(f"feature dimension {X.shape[1]} != model dimension {m.arch.dim}")
    p = softmax(logits(m, X))
    return p[0] if single else p


def predict(m: ModelParams, X) -> np.ndarray:
    return logits(m, np.atleast_2d(X)).argmax(axis=1)


def accuracy(m: ModelParams, d: Dataset) -> float:
    return float(np.mean(predict_proba(m, d.X).argmax(axis=1) == d.y))


def hvp(m: ModelParams, d: Dataset, v) -> np.ndarray:
    """Hessian of the empirical objective on ``d`` times ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != m.theta.shape:
        raise DimensionError(f"vector has shape {v.shape}, expected {m.theta.shape}")
    net = m.arch.build()
    X, y = _as_xy(d, m.arch.dim)
    if isinstance(net, LinearNet):
        Wv, bv = net.unpack(v)
        p = softmax(logits(m, X))
        s = X @ Wv.T + bv
        t = p * s - p * (p * s).sum(axis=1, keepdims=True)
        n = len(X)
        return np.concatenate([(t.T @ X).ravel(), t.sum(axis=0)]) / n + m.arch.l2_reg * v
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(v)
    r = 1e-5 / nv
    gp = mean_grad(m, (X, y), m.theta + r * v)
    gm = mean_grad(m, (X, y), m.theta - r * v)
    return (gp - gm) / (2 * r)


def hessian(m: ModelParams, d: Dataset) -> np.ndarray:
    """Dense Hessian of the empirical objective (exact for LR)."""
    net = m.arch.build()
    X, y = _as_xy(d, m.arch.dim)
    p = m.theta.size
    if isinstance(net, LinearNet):
        H = net.hessian(m.theta, X, np.full(len(X), 1.0 / len(X)))
        return H + m.arch.l2_reg * np.eye(p)
    H = np.column_stack([hvp(m, d, e) for e in np.eye(p)])
    return 0.5 * (H + H.T)


def init_params(arch: Architecture, seed) -> ModelParams:
    return ModelParams(arch.build().init(np.random.default_rng(seed)), arch, seed)


def train(d: Dataset, arch: Architecture, cfg: TrainConfig, init: ModelParams | None = None) -> ModelParams:
    """Deterministic training: a pure function of (dataset, architecture, config)."""
    if len(d) == 0:
        raise ParameterError("cannot train on an empty dataset")
    if d.dim != arch.dim:
        raise DimensionError(f"dataset dimension {d.dim} != architecture dimension {arch.dim}")
    rng = np.random.default_rng(cfg.seed)
    m = init_params(arch, cfg.seed) if init is None else ModelParams(init.theta, arch, cfg.seed)
    theta = m.theta.copy()
    X, y = d.X, d.y
    n = len(y)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    mom1 = np.zeros_like(theta)
    mom2 = np.zeros_like(theta)
    step = 0
    history = [objective(m, d)]
    for epoch in range(cfg.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            g = mean_grad(m, (X[idx], y[idx]), theta)
            step += 1
            if cfg.optimizer == "sgd":
                theta -= cfg.lr * g
            else:
                b1, b2 = cfg.betas
                mom1 = b1 * mom1 + (1 - b1) * g
                mom2 = b2 * mom2 + (1 - b2) * g * g
                mhat = mom1 / (1 - b1**step)
                vhat = mom2 / (1 - b2**step)
                theta -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"training diverged at epoch {epoch}", epoch=epoch)
        with np.errstate(over="ignore", invalid="ignore"):
            cur = float(np.mean(_ce(arch.build().forward(theta, X)[0], y)) + 0.5 * arch.l2_reg * theta @ theta)
        if not np.isfinite(cur):
            raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch=epoch)
        history.append(cur)
    return ModelParams(theta, arch, cfg.seed, tuple(history))


def fit_minimizer(d: Dataset, arch: Architecture, tol=1e-8, max_iter=100, init=None):
    """Damped Newton descent to gradient norm <= tol (strongly convex LR only).

    Returns the model and the list of iterates visited.
    """
    if arch.kind != "lr" or arch.l2_reg <= 0:
        raise ParameterError("exact minimization requires LR with l2_reg > 0")
    m = init_params(arch, 0) if init is None else init
    path = [m.theta.copy()]
    for _ in range(max_iter):
        g = mean_grad(m, d)
        if np.linalg.norm(g) <= tol:
            return m, path
        step = np.linalg.solve(hessian(m, d), g)
        f0, t = objective(m, d), 1.0
        while t > 1e-10:
            cand = m.replace_theta(m.theta - t * step)
            if objective(cand, d) <= f0 - 1e-4 * t * (g @ step):
                break
            t *= 0.5
        m = cand
        path.append(m.theta.copy())
    g = mean_grad(m, d)
    if np.linalg.norm(g) <= tol:
        return m, path
    raise TrainingError(f"minimizer not reached: gradient norm {np.linalg.norm(g):.3e} > {tol}")


def save_model(m: ModelParams, path):
    meta = json.dumps({"format": "model", "version": MODEL_FORMAT_VERSION, "arch": m.arch.to_dict(), "train_seed": m.train_seed})
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(meta), theta=m.theta)


def load_model(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "model" or "version" not in meta:
            raise ParameterError(f"{path} is not a model snapshot")
        if meta["version"] > MODEL_FORMAT_VERSION:
            raise ParameterError(f"model snapshot version {meta['version']} is newer than supported")
        return ModelParams(z["theta"], Architecture.from_dict(meta["arch"]), meta["train_seed"])
