"""End-to-end contribution workflow: split, train at t=0, attack, train both t=1 arms, attribute, report."""

from __future__ import annotations

import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import attribution as A
from . import model as M
from . import outlier as O
from . import shadow as S
from .compensation import TopKConfig, compensation_share, fraction_of_change
from .config import ExperimentConfig
from .dataset import (Dataset, load_csv, load_dataset, load_digits_dataset, load_idx, save_dataset, split_contribution,
                      synth_blobs)
from .errors import ConfigError, StageError

REPORT_VERSION = 1


def load_source(cfg: ExperimentConfig, seed) -> Dataset:
    if cfg.source == "blobs":
        return synth_blobs(cfg.sizes.total() + cfg.pool_extra, cfg.blob_classes, cfg.blob_dim, cfg.blob_spread, seed)
    if cfg.source == "digits":
        return load_digits_dataset()
    if cfg.source == "idx":
        return load_idx(cfg.data_path, cfg.labels_path)
    if cfg.source == "csv":
        return load_csv(cfg.data_path)
    return load_dataset(cfg.data_path)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    seeds: dict
    datasets: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)
    compensation: dict = field(default_factory=dict)
    change: object = None
    attack: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def ratio(self):
        o, m = self.compensation["original"].share, self.compensation["manipulated"].share
        return ratio_of(o, m)

    def hashes(self) -> dict:
        out = {f"dataset/{k}": v.content_hash() for k, v in self.datasets.items()}
        out.update({f"model/{k}": A.model_hash(v) for k, v in self.models.items()})
        out.update({f"matrix/{k}": matrix_hash(v) for k, v in self.matrices.items()})
        return dict(sorted(out.items()))

    def report(self) -> dict:
        """Everything a table needs; deterministic (no wall-clock values)."""
        cfg = self.config
        comp = {k: v.to_dict() for k, v in self.compensation.items()}
        return {
            "report_version": REPORT_VERSION,
            "run_id": cfg.run_id,
            "setting": setting_label(cfg),
            "adversary_fraction": [cfg.z1_adversary, cfg.z0 + cfg.z1_new_benign + cfg.z1_adversary],
            "original": comp["original"]["share"],
            "manipulated": comp["manipulated"]["share"],
            "ratio": self.ratio,
            "compensation": comp,
            "change": self.change.to_dict(),
            "accuracy": self.accuracy,
            "attack": {"meta": self.attack.get("meta", {}), "records": self.attack.get("records", [])},
            "seeds": self.seeds,
            "config": cfg.to_dict(),
            "hashes": self.hashes(),
        }


def ratio_of(original, manipulated):
    if original == 0:
        return None if manipulated else 1.0
    return manipulated / original


def setting_label(cfg: ExperimentConfig) -> str:
    src = cfg.source if cfg.source != "blobs" else f"blobs{cfg.blob_dim}"
    return f"{src}/{cfg.arch}/{cfg.method}/{cfg.attack}"


def matrix_hash(cm: A.ContributionMatrix) -> str:
    h = hashlib.sha256(cm.values.tobytes())
    h.update(cm.train_ids.tobytes())
    h.update(cm.val_ids.tobytes())
    h.update(cm.method.encode())
    return h.hexdigest()


@contextmanager
def _stage(name, art: RunArtifacts):
    t = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError(name, exc, {"completed": list(art.timing), "hashes": art.hashes()}) from exc
    art.timing[name] = time.perf_counter() - t


def run_attack(cfg: ExperimentConfig, split, m0, arch, seeds):
    src = split.z1_adversary_source
    seed = seeds["attack"]
    if cfg.attack == "none":
        return O.AttackResult(src, [], {"attack": "none"})
    if cfg.attack == "random":
        return O.random_perturb(src, cfg.eps, seed, cfg.random_kind)
    if cfg.attack == "fgsm":
        return O.fgsm_attack(m0, src, cfg.eps)
    if cfg.attack == "pgd":
        return O.pgd_attack(m0, src, cfg.eps, cfg.pgd_steps)
    if cfg.attack == "zoo":
        q = O.BlackBoxQuery.from_model(m0)
        zc = O.ZooConfig(cfg.eps, cfg.zoo_h, cfg.zoo_max_coords, cfg.zoo_iterations, seed=seed)
        res = O.zoo_attack(q, src, zc)
        res.meta["total_queries"] = q.count
        return res
    if cfg.attack == "simba":
        q = O.BlackBoxQuery.from_model(m0)
        res = O.simba_attack(q, src, O.SimbaConfig(cfg.eps, cfg.simba_max_queries, seed))
        res.meta["total_queries"] = q.count
        return res
    # shadow: the adversary knows Z0's distribution through the pool, not Z0 itself
    sarch = cfg.architecture(src.dim, src.num_classes, cfg.shadow_arch)
    ens = S.train_shadow_ensemble(split.pool, src, cfg.shadow_m, cfg.shadow_subset, sarch,
                                  cfg.train_config(seeds["shadow"]), seeds["shadow"], cfg.shadow_val,
                                  exclude_ids=split.z1_benign.ids)
    return S.shadow_attack(src, ens, S.AttackBudget(cfg.step_size, cfg.iterations), cfg.k)


def run_attribution(cfg, train, m, val, arch, tcfg, seeds):
    acfg = cfg.attribution_config(seeds["attribution"])
    if cfg.method == "shapley":
        tcfg = M.TrainConfig(**{**tcfg.to_dict(), "epochs": cfg.shapley_retrain_epochs})
    return A.attribute(cfg.method, train, m, val, arch=arch, tcfg=tcfg, config=acfg)


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    seeds = cfg.seeds()
    art = RunArtifacts(cfg, seeds)
    with _stage("data", art):
        data = load_source(cfg, seeds["data"])
        split = split_contribution(data, cfg.sizes, seeds["split"])
        art.datasets["v1"] = split.v1
        art.datasets["adversary_original"] = split.z1_adversary_source
    arch = cfg.architecture(data.dim, data.num_classes)
    tcfg = cfg.train_config(seeds["train"])
    with _stage("train_t0", art):
        m0 = M.train(split.z0, arch, tcfg)
        art.models["t0"] = m0
        art.accuracy["t0_train"] = M.accuracy(m0, split.z0)
        art.accuracy["t0_v0"] = M.accuracy(m0, split.v0)
    with _stage("attack", art):
        res = run_attack(cfg, split, m0, arch, seeds)
        art.attack = {"meta": _plain(res.meta), "records": _plain(res.records)}
        art.datasets["adversary_manipulated"] = res.data
    init = m0 if cfg.warm_start else None
    for arm, adv in (("original", None), ("manipulated", res.data)):
        with _stage(f"train_t1_{arm}", art):
            z1 = split.assemble_t1(adv)
            m1 = M.train(z1, arch, tcfg, init=init)
            art.datasets[f"z1_{arm}"] = z1
            art.models[f"t1_{arm}"] = m1
            art.accuracy[f"t1_{arm}_v1"] = M.accuracy(m1, split.v1)
        with _stage(f"attribute_{arm}", art):
            art.matrices[arm] = run_attribution(cfg, z1, m1, split.v1, arch, tcfg, seeds)
    with _stage("evaluate", art):
        top = TopKConfig(cfg.k)
        adv_ids = split.z1_adversary_source.ids
        for arm in ("original", "manipulated"):
            art.compensation[arm] = compensation_share(art.matrices[arm], adv_ids, top)
        art.change = fraction_of_change(art.matrices["original"], art.matrices["manipulated"], adv_ids, top)
    return art


def _plain(o):
    return json.loads(json.dumps(o, default=A._jsonable))


# ---------------------------------------------------------------- persistence


def dump_json(obj, path):
    with open(path, "w") as f:
        f.write(json.dumps(obj, indent=1, sort_keys=True, default=A._jsonable))
        f.write("\n")


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@contextmanager
def run_lock(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise StageError("lock", f"{out_dir} is locked by another writer") from exc
    try:
        yield out_dir
    finally:
        lock.release()


def save_run(art: RunArtifacts, out_dir) -> Path:
    """Write snapshots, matrices, report and manifest.  ``timing.json`` is the only
    file whose bytes depend on the wall clock and is not listed in the manifest."""
    out = Path(out_dir)
    for sub in ("datasets", "models", "matrices"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k, d in art.datasets.items():
        save_dataset(d, out / "datasets" / f"{k}.npz")
    for k, m in art.models.items():
        M.save_model(m, out / "models" / f"{k}.npz")
    for k, cm in art.matrices.items():
        A.save_matrix(cm, out / "matrices" / k)
    dump_json(art.config.to_dict(), out / "config.json")
    dump_json(art.report(), out / "report.json")
    dump_json({k: round(v, 6) for k, v in art.timing.items()}, out / "timing.json")
    manifest = {
        "config": art.config.to_dict(),
        "seeds": art.seeds,
        "content_hashes": art.hashes(),
        "report_sha256": _sha(out / "report.json"),
    }
    dump_json(manifest, out / "manifest.json")
    return out


def write_failure(err: StageError, cfg: ExperimentConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"config": cfg.to_dict(), "failed_stage": err.stage, "error": str(err.cause), "partial": err.partial},
              out / "manifest.json")


def execute(cfg: ExperimentConfig, out_dir) -> RunArtifacts:
    """run_experiment + save_run under the run-directory lock."""
    with run_lock(out_dir) as out:
        try:
            art = run_experiment(cfg)
        except StageError as err:
            write_failure(err, cfg, out)
            raise
        save_run(art, out)
    return art


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path) as f:
            man = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if "content_hashes" not in man:
        raise ConfigError(f"{path} is not a completed-run manifest")
    return man


def reproduce(manifest_path, out_dir) -> dict:
    """Rerun a manifest's config and compare every content hash and the report bytes."""
    man = load_manifest(manifest_path)
    cfg = ExperimentConfig.from_dict(man["config"])
    art = execute(cfg, out_dir)
    new = art.hashes()
    diffs = sorted(k for k in set(new) | set(man["content_hashes"]) if new.get(k) != man["content_hashes"].get(k))
    report_sha = _sha(Path(out_dir) / "report.json")
    return {"identical": not diffs and report_sha == man["report_sha256"], "hash_diffs": diffs,
            "report_identical": report_sha == man["report_sha256"]}


def load_report(run_dir) -> dict:
    with open(Path(run_dir) / "report.json") as f:
        return json.load(f)
