"""Top-k compensation mechanism, compensation share and Fraction of Change."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .attribution import ContributionMatrix
from .errors import DimensionError, ParameterError

TIE_POLICIES = ("smaller_id",)


@dataclass(frozen=True)
class TopKConfig:
    k: int = 20
    tie_policy: str = "smaller_id"

    def __post_init__(self):
        if self.tie_policy not in TIE_POLICIES:
            raise ParameterError(f"unknown tie policy {self.tie_policy!r}")


def _check_k(tau: ContributionMatrix, cfg: TopKConfig):
    if not 1 <= cfg.k <= tau.shape[0]:
        raise ParameterError(f"k={cfg.k} outside [1, {tau.shape[0]}]")


def top_k_indices(tau: ContributionMatrix, cfg: TopKConfig) -> np.ndarray:
    """(k, |V|) row indices of the top-k training points per validation column.

    Ranking is by raw score, descending; equal scores go to the smaller id.
    """
    _check_k(tau, cfg)
    by_id = np.argsort(tau.train_ids, kind="stable")
    vals = tau.values[by_id]
    order = np.argsort(-vals, axis=0, kind="stable")[: cfg.k]
    return by_id[order]


def top_k_sets(tau: ContributionMatrix, cfg: TopKConfig) -> list[frozenset]:
    idx = top_k_indices(tau, cfg)
    return [frozenset(tau.train_ids[idx[:, j]].tolist()) for j in range(idx.shape[1])]


def adversary_counts(tau: ContributionMatrix, adversary_ids, cfg: TopKConfig) -> np.ndarray:
    adv = np.asarray(sorted(set(int(a) for a in adversary_ids)), dtype=np.int64)
    known = np.isin(adv, tau.train_ids)
    if not known.all():
        raise ParameterError(f"unknown adversary ids: {adv[~known][:10].tolist()}")
    mask = np.isin(tau.train_ids, adv)
    return mask[top_k_indices(tau, cfg)].sum(axis=0).astype(np.int64)


@dataclass(frozen=True)
class CompensationReport:
    share: float
    share_exact: Fraction
    counts: np.ndarray
    k: int
    num_val: int
    num_adversary: int

    def to_dict(self):
        return {
            "share": self.share,
            "share_exact": f"{self.share_exact.numerator}/{self.share_exact.denominator}",
            "total_count": int(self.counts.sum()),
            "k": self.k,
            "num_val": self.num_val,
            "num_adversary": self.num_adversary,
            "counts": self.counts.tolist(),
        }


def compensation_share(tau: ContributionMatrix, adversary_ids, cfg: TopKConfig) -> CompensationReport:
    counts = adversary_counts(tau, adversary_ids, cfg)
    exact = Fraction(int(counts.sum()), cfg.k * tau.shape[1])
    return CompensationReport(float(exact), exact, counts, cfg.k, tau.shape[1], len(set(adversary_ids)))


@dataclass(frozen=True)
class ChangeReport:
    more: Fraction
    tied: Fraction
    fewer: Fraction
    num_val: int

    def to_dict(self):
        out = {"num_val": self.num_val}
        for name in ("more", "tied", "fewer"):
            fr = getattr(self, name)
            out[name] = float(fr)
            out[name + "_count"] = int(fr * self.num_val)
        return out


def fraction_of_change(tau_orig: ContributionMatrix, tau_manip: ContributionMatrix, adversary_ids, cfg: TopKConfig) -> ChangeReport:
    if not np.array_equal(tau_orig.val_ids, tau_manip.val_ids):
        raise DimensionError("original and manipulated matrices have different validation ids")
    before = adversary_counts(tau_orig, adversary_ids, cfg)
    after = adversary_counts(tau_manip, adversary_ids, cfg)
    n = len(before)
    more = int((after > before).sum())
    fewer = int((after < before).sum())
    return ChangeReport(Fraction(more, n), Fraction(n - more - fewer, n), Fraction(fewer, n), n)
