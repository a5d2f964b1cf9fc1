"""Flat experiment configuration with a schema version and strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from .attribution import METHODS, CGConfig, ShapleyConfig, TrakConfig
from .dataset import SplitSizes
from .errors import ConfigError

SCHEMA_VERSION = 1
ATTACKS = ("none", "shadow", "zoo", "simba", "random", "fgsm", "pgd")
SOURCES = ("blobs", "digits", "idx", "csv", "npz")
SEED_STREAMS = ("data", "split", "train", "attack", "shadow", "attribution")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    run_id: str = "run"
    seed: int = 0
    # data
    source: str = "blobs"
    data_path: str | None = None
    labels_path: str | None = None
    blob_dim: int = 64
    blob_classes: int = 10
    blob_spread: float = 0.4
    pool_extra: int = 2000
    z0: int = 2000
    z1_new_benign: int = 150
    z1_adversary: int = 50
    v0: int = 200
    v1: int = 200
    # model and training
    arch: str = "lr"
    hidden: tuple = (10, 10, 10, 10, 10)
    filters: tuple = (8, 16)
    dense: int = 32
    l2_reg: float = 1e-3
    optimizer: str = "adam"
    lr: float = 0.05
    epochs: int = 100
    batch_size: int | None = None
    warm_start: bool = False
    # attribution
    method: str = "if"
    k: int = 20
    cg_damping: float | None = None
    cg_max_iter: int = 500
    cg_tol: float = 1e-10
    trak_k: int | None = 512
    trak_ridge: float | None = None
    shapley_permutations: int = 20
    shapley_retrain_epochs: int = 5
    shapley_tol: float = 1e-3
    shapley_max_retrains: int | None = None
    # attack
    attack: str = "none"
    eps: float = 0.03
    step_size: float = 0.01
    iterations: int = 10
    shadow_m: int = 10
    shadow_subset: int = 1000
    shadow_val: int = 200
    shadow_arch: str | None = None  # None: same as the target
    zoo_h: float = 1e-4
    zoo_iterations: int = 1
    zoo_max_coords: int = 128
    simba_max_queries: int | None = None
    pgd_steps: int = 10
    random_kind: str = "sign"

    def __post_init__(self):
        for name in ("hidden", "filters"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} not supported (expected {SCHEMA_VERSION})")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}")
        if self.source in ("idx", "csv", "npz") and not self.data_path:
            raise ConfigError(f"source {self.source!r} needs data_path")
        if self.source == "idx" and not self.labels_path:
            raise ConfigError("source 'idx' needs labels_path")
        if self.arch not in M.KINDS:
            raise ConfigError(f"arch must be one of {M.KINDS}")
        if self.shadow_arch is not None and self.shadow_arch not in M.KINDS:
            raise ConfigError(f"shadow_arch must be one of {M.KINDS} or null")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}")
        if self.random_kind not in ("sign", "uniform"):
            raise ConfigError("random_kind must be 'sign' or 'uniform'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        positive = ("z0", "z1_adversary", "v0", "v1", "k", "epochs", "iterations", "shadow_m", "shadow_subset",
                    "shadow_val", "zoo_iterations", "zoo_max_coords", "pgd_steps", "shapley_permutations",
                    "blob_dim", "blob_classes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("z1_new_benign", "pool_extra", "eps", "step_size", "l2_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.lr > 0 or not self.zoo_h > 0 or not self.blob_spread > 0:
            raise ConfigError("lr, zoo_h and blob_spread must be > 0")
        if self.k > self.z0 + self.z1_new_benign + self.z1_adversary:
            raise ConfigError("k exceeds the t=1 training set size")
        if self.attack == "shadow" and self.shadow_val + self.shadow_subset > self.pool_extra:
            raise ConfigError("pool_extra too small for shadow_val + shadow_subset")

    # ------------------------------------------------------------ derived objects

    @property
    def sizes(self):
        return SplitSizes(self.z0, self.z1_new_benign, self.z1_adversary, self.v0, self.v1)

    def architecture(self, dim, num_classes, kind=None):
        return M.Architecture(kind or self.arch, dim, num_classes, self.hidden, self.filters, self.dense, self.l2_reg)

    def train_config(self, seed):
        return M.TrainConfig(self.epochs, self.lr, self.optimizer, self.batch_size, seed)

    def attribution_config(self, seed):
        if self.method == "if":
            return CGConfig(self.cg_damping, self.cg_max_iter, self.cg_tol)
        if self.method == "trak":
            return TrakConfig(self.trak_k, seed, self.trak_ridge)
        if self.method == "shapley":
            return ShapleyConfig(self.shapley_permutations, self.shapley_tol, retrain_epochs=self.shapley_retrain_epochs,
                                 seed=seed, max_retrains=self.shapley_max_retrains)
        return None

    def seeds(self) -> dict:
        """Named seeds derived from the master seed; each stream is independent."""
        out = {}
        for i, name in enumerate(SEED_STREAMS):
            out[name] = int(np.random.SeedSequence([self.seed, i]).generate_state(1)[0])
        return out

    # ------------------------------------------------------------ serialization

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["filters"] = list(self.filters)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "schema_version" not in d:
            raise ConfigError("config is missing schema_version")
        for key, val in d.items():
            if isinstance(val, (dict,)):
                raise ConfigError(f"config must be flat; {key!r} is nested")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **kw):
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})


def desk_lr(**kw) -> ExperimentConfig:
    """LR on 8x8 blobs, IF attribution: the shadow / ZOO / FGSM / random setting."""
    return ExperimentConfig(**kw)


def desk_mlp(**kw) -> ExperimentConfig:
    """Five-layer tanh MLP on 8x8 blobs with TRAK attribution: the SimBA setting."""
    base = dict(arch="mlp", l2_reg=0.0, optimizer="adam", lr=0.01, epochs=30, batch_size=32,
                method="trak", attack="simba", eps=0.1)
    return ExperimentConfig(**{**base, **kw})
