"""Result tables (CSV + markdown) and figures for finished runs and theory checks."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ParameterError  # noqa: E402

COLUMNS = ("setting", "|Z1a|/|Z1|", "Original", "Manipulated", "Ratio", "More", "Tied", "Fewer")


def format_ratio(ratio) -> str:
    """Percent with one decimal, from a full-precision ratio."""
    if ratio is None:
        return "n/a"
    return f"{round(ratio * 1000) / 10:.1f}%"


def format_share(share) -> str:
    return f"{share:.4f}"


def format_pct(frac) -> str:
    return f"{frac * 100:.1f}%"


def table_rows(reports: list) -> list:
    if not reports:
        raise ParameterError("emit_tables needs at least one run")
    rows = []
    for r in reports:
        adv, total = r["adversary_fraction"]
        ch = r["change"]
        rows.append([
            r["setting"],
            f"{adv}/{total}",
            format_share(r["original"]),
            format_share(r["manipulated"]),
            format_ratio(r["ratio"]),
            format_pct(ch["more"]),
            format_pct(ch["tied"]),
            format_pct(ch["fewer"]),
        ])
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def to_markdown(rows) -> str:
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def emit_tables(reports: list, out_dir=None) -> dict:
    """Render run reports (dicts from ``RunArtifacts.report()``) as CSV and markdown.

    Returns the two documents; with ``out_dir`` they are also written to
    ``tables.csv`` / ``tables.md``.
    """
    reports = [r.report() if hasattr(r, "report") else r for r in reports]
    rows = table_rows(reports)
    docs = {"csv": to_csv(rows), "markdown": to_markdown(rows)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tables.csv").write_text(docs["csv"])
        (out / "tables.md").write_text(docs["markdown"])
    return docs


def plot_shares(reports, path):
    reports = [r.report() if hasattr(r, "report") else r for r in reports]
    if not reports:
        raise ParameterError("nothing to plot")
    labels = [r["run_id"] for r in reports]
    x = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(reports) + 2), 3.5))
    ax.bar(x - 0.2, [r["original"] for r in reports], 0.4, label="original")
    ax.bar(x + 0.2, [r["manipulated"] for r in reports], 0.4, label="manipulated")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("compensation share")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_theory(rep, path):
    ns = np.asarray(rep.ns, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    series = [("unchanged points", rep.unchanged_delta), ("perturbed point", rep.perturbed_delta),
              ("||H'^-1 - H^-1||", rep.hinv_diff), ("||theta' - theta||", rep.theta_diff)]
    for name, vals in series:
        vals = np.asarray(vals, dtype=float)
        if np.all(vals > 0):
            ax.loglog(ns, vals, "o-", label=name)
    ref = np.asarray(rep.unchanged_delta, dtype=float)
    if ref[0] > 0:
        ax.loglog(ns, ref[0] * ns[0] / ns, "k--", lw=0.8, label="1/n")
    ax.set_xlabel("n")
    ax.set_ylabel("median max delta")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def theory_csv(rep) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "log_n", "unchanged", "unchanged_common", "perturbed", "hinv_diff", "theta_diff"])
    for i, n in enumerate(rep.ns):
        vals = [rep.unchanged_delta[i], rep.unchanged_common_delta[i], rep.perturbed_delta[i], rep.hinv_diff[i], rep.theta_diff[i]]
        w.writerow([n, f"{np.log(n):.6f}", *[f"{v:.10e}" for v in vals]])
    return buf.getvalue()


def theory_text(rep) -> str:
    def s(v):
        return "n/a" if v is None else f"{v:.3f}"

    lines = [
        f"ns: {rep.ns}  trials: {rep.trials}  perturb_mag: {rep.perturb_mag}  seed: {rep.seed}",
        f"slope unchanged-point delta: {s(rep.slope_unchanged)}",
        f"slope unchanged-point delta (shared points): {s(rep.slope_unchanged_common)}",
        f"slope perturbed-point delta: {s(rep.slope_perturbed)}",
        f"slope Hessian-inverse difference: {s(rep.slope_hinv)}",
        f"min parameter-bound margin: {min(rep.bound_margins):.4e}",
    ]
    return "\n".join(lines) + "\n"
