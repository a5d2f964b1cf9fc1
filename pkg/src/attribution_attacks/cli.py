"""Command-line entry point.  Every subcommand takes --seed and --out."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import attribution as A
from . import model as M
from . import pipeline as P
from . import report as R
from . import theory as T
from .compensation import TopKConfig, compensation_share, fraction_of_change
from .config import ATTACKS, ExperimentConfig
from .dataset import ContributionSplit, load_dataset, save_dataset, split_contribution
from .errors import ConfigError, DimensionError, IdxFormatError, ParameterError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
SPLIT_PARTS = ("z0", "z1_benign_new", "z1_adversary_source", "v0", "v1", "pool")


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kw):
        try:
            return fn(*args, **kw)
        except (ConfigError, ParameterError, DimensionError, IdxFormatError, FileNotFoundError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # noqa: BLE001
            click.echo(f"stage failure: {exc}", err=True)
            sys.exit(EXIT_STAGE)
    return wrapper


def common(fn):
    fn = click.option("--out", required=True, type=click.Path(file_okay=False), help="output directory")(fn)
    fn = click.option("--seed", type=int, default=None, help="master seed (overrides the config)")(fn)
    return fn


def _config(path, seed, **overrides):
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    over = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        over["seed"] = seed
    return cfg.replace(**over) if over else cfg


def _load_split(data_dir) -> ContributionSplit:
    d = Path(data_dir)
    return ContributionSplit(**{p: load_dataset(d / f"{p}.npz") for p in SPLIT_PARTS})


def _out(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="experiment config (JSON)")


@click.group()
def main():
    """Data-attribution compensation attacks: pipeline, attacks and theory checks."""


@main.command()
@config_opt
@common
@_guard
def run(config_path, seed, out):
    """Full pipeline for one config; writes snapshots, report, manifest, table and figure."""
    cfg = _config(config_path, seed)
    art = P.execute(cfg, out)
    R.emit_tables([art], out)
    R.plot_shares([art], Path(out) / "shares.png")
    click.echo(R.to_csv(R.table_rows([art.report()])), nl=False)


@main.command()
@click.option("--manifest", required=True, type=click.Path(), help="manifest.json or run directory")
@common
@_guard
def reproduce(manifest, seed, out):
    """Rerun a manifest and compare content hashes and report bytes."""
    if seed is not None:
        raise ConfigError("reproduce takes its seed from the manifest")
    res = P.reproduce(manifest, out)
    click.echo(json.dumps(res, sort_keys=True))
    if not res["identical"]:
        sys.exit(EXIT_STAGE)


@main.command("generate-data")
@config_opt
@common
@_guard
def generate_data(config_path, seed, out):
    """Load or synthesize the source data and write the contribution split."""
    cfg = _config(config_path, seed)
    seeds = cfg.seeds()
    split = split_contribution(P.load_source(cfg, seeds["data"]), cfg.sizes, seeds["split"])
    o = _out(out)
    for part in SPLIT_PARTS:
        save_dataset(getattr(split, part), o / f"{part}.npz")
    P.dump_json({"config": cfg.to_dict(), "seeds": seeds,
                 "hashes": {p: getattr(split, p).content_hash() for p in SPLIT_PARTS}}, o / "split.json")
    click.echo(" ".join(f"{p}={len(getattr(split, p))}" for p in SPLIT_PARTS))


@main.command()
@config_opt
@click.option("--data", required=True, type=click.Path(file_okay=False), help="split directory")
@click.option("--set", "which", type=click.Choice(["z0", "z1"]), default="z0")
@click.option("--adversary", type=click.Path(dir_okay=False), default=None, help="manipulated adversary snapshot (z1 only)")
@common
@_guard
def train(config_path, data, which, adversary, seed, out):
    """Train the target model on Z0 or on the assembled t=1 set."""
    cfg = _config(config_path, seed)
    split = _load_split(data)
    d = split.z0 if which == "z0" else split.assemble_t1(load_dataset(adversary) if adversary else None)
    m = M.train(d, cfg.architecture(d.dim, d.num_classes), cfg.train_config(cfg.seeds()["train"]))
    o = _out(out)
    M.save_model(m, o / "model.npz")
    click.echo(f"train_accuracy={M.accuracy(m, d):.4f} model={A.model_hash(m)}")


@main.command()
@click.argument("kind", type=click.Choice([a for a in ATTACKS if a != "none"]))
@config_opt
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--model", "model_path", type=click.Path(dir_okay=False), default=None, help="t=0 model (not needed for shadow/random)")
@click.option("--eps", type=float, default=None)
@common
@_guard
def attack(kind, config_path, data, model_path, eps, seed, out):
    """Manipulate the adversary's points."""
    cfg = _config(config_path, seed, attack=kind, eps=eps)
    split = _load_split(data)
    src = split.z1_adversary_source
    if kind in ("zoo", "simba", "fgsm", "pgd") and not model_path:
        raise ConfigError(f"attack {kind} needs --model")
    m0 = M.load_model(model_path) if model_path else None
    arch = m0.arch if m0 is not None else cfg.architecture(src.dim, src.num_classes)
    res = P.run_attack(cfg, split, m0, arch, cfg.seeds())
    o = _out(out)
    save_dataset(res.data, o / "adversary.npz")
    P.dump_json({"meta": res.meta, "records": res.records}, o / "attack.json")
    click.echo(f"attack={kind} realized_linf={res.meta.get('realized_linf', 0.0):.6f}")


@main.command()
@click.argument("method", type=click.Choice(list(A.METHODS)))
@config_opt
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--adversary", type=click.Path(dir_okay=False), default=None)
@common
@_guard
def attribute(method, config_path, data, model_path, adversary, seed, out):
    """Score the t=1 training set against V1."""
    cfg = _config(config_path, seed, method=method)
    split = _load_split(data)
    z1 = split.assemble_t1(load_dataset(adversary) if adversary else None)
    m = M.load_model(model_path)
    cm = P.run_attribution(cfg, z1, m, split.v1, m.arch, cfg.train_config(cfg.seeds()["train"]), cfg.seeds())
    o = _out(out)
    A.save_matrix(cm, o / "matrix")
    click.echo(f"method={method} shape={cm.shape[0]}x{cm.shape[1]}")


@main.command()
@click.option("--original", required=True, help="matrix path prefix (without .npy)")
@click.option("--manipulated", required=True, help="matrix path prefix (without .npy)")
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--k", type=int, default=20)
@common
@_guard
def evaluate(original, manipulated, data, k, seed, out):
    """Compensation shares and Fraction of Change for a pair of matrices."""
    split = _load_split(data)
    ids = split.z1_adversary_source.ids
    top = TopKConfig(k)
    to, tm = A.load_matrix(original), A.load_matrix(manipulated)
    co, cm = compensation_share(to, ids, top), compensation_share(tm, ids, top)
    ch = fraction_of_change(to, tm, ids, top)
    rep = {"original": co.to_dict(), "manipulated": cm.to_dict(), "ratio": P.ratio_of(co.share, cm.share), "change": ch.to_dict()}
    P.dump_json(rep, _out(out) / "evaluation.json")
    click.echo(f"original={R.format_share(co.share)} manipulated={R.format_share(cm.share)} ratio={R.format_ratio(rep['ratio'])}")


@main.command("verify-theory")
@click.option("--ns", default="200,400,800", help="comma-separated training-set sizes")
@click.option("--trials", type=int, default=20)
@click.option("--perturb-mag", type=float, default=0.3)
@click.option("--n-perturbed", type=int, default=1, help="k-sweep: number of perturbed points")
@common
@_guard
def verify_theory(ns, trials, perturb_mag, n_perturbed, seed, out):
    """Influence stability, parameter bound and Hessian-inverse scaling on regularized LR."""
    try:
        n_list = [int(v) for v in ns.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --ns {ns!r}") from exc
    if len(n_list) < 1 or min(n_list) <= n_perturbed:
        raise ConfigError("--ns must list sizes larger than --n-perturbed")
    rep = T.stability_experiment(n_list, perturb_mag, trials, seed or 0, n_perturbed=n_perturbed)
    o = _out(out)
    P.dump_json(rep.to_dict(), o / "theory.json")
    (o / "theory.csv").write_text(R.theory_csv(rep))
    text = R.theory_text(rep)
    (o / "theory.txt").write_text(text)
    R.plot_theory(rep, o / "theory.png")
    click.echo(text, nl=False)


@main.command()
@click.option("--runs", "run_dirs", multiple=True, required=True, type=click.Path(file_okay=False), help="run directory (repeatable)")
@common
@_guard
def report(run_dirs, seed, out):
    """Tables (CSV + markdown) and share figure for finished runs."""
    reports = [P.load_report(d) for d in run_dirs]
    docs = R.emit_tables(reports, out)
    R.plot_shares(reports, Path(out) / "shares.png")
    click.echo(docs["csv"], nl=False)


if __name__ == "__main__":
    main()
