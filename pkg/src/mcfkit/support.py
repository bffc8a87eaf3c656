"""Common-support trimming on estimated propensity scores."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, DescriptiveReport, compare_groups, write_table


class SupportCollapseWarning(UserWarning):
    """A propensity column has lower bound above upper bound."""


@dataclass(frozen=True)
class SupportRule:
    """``variant="minmax"`` or ``"quantile"`` with ``q_low < q_high``."""

    variant: str = "minmax"
    q_low: float = 0.0
    q_high: float = 1.0

    def __post_init__(self):
        if self.variant not in ("minmax", "quantile"):
            raise ValueError(f"unknown support rule {self.variant!r}")
        if not 0.0 <= self.q_low < self.q_high <= 1.0:
            raise ValueError("need 0 <= q_low < q_high <= 1")

    @classmethod
    def minmax(cls) -> "SupportRule":
        return cls("minmax")

    @classmethod
    def quantile(cls, q_low: float, q_high: float) -> "SupportRule":
        return cls("quantile", q_low, q_high)


@dataclass
class SupportReport:
    keep: np.ndarray
    lower: np.ndarray          # per propensity column
    upper: np.ndarray
    collapsed: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_dropped(self) -> int:
        return int(np.sum(~self.keep))

    @property
    def dropped_share(self) -> float:
        return self.n_dropped / self.keep.size if self.keep.size else 0.0

    def bounds_rows(self) -> list[dict]:
        return [{"column": k, "lower": float(lo), "upper": float(hi),
                 "collapsed": k in self.collapsed}
                for k, (lo, hi) in enumerate(zip(self.lower, self.upper))]


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: the ceil(q * n)-th smallest value (q=0 gives the min)."""
    v = np.sort(np.asarray(values, dtype=float))
    rank = max(1, math.ceil(q * v.size - 1e-12))
    return float(v[min(rank, v.size) - 1])


def _group_bounds(values: np.ndarray, rule: SupportRule) -> tuple[float, float]:
    if rule.variant == "minmax":
        return float(values.min()), float(values.max())
    return nearest_rank(values, rule.q_low), nearest_rank(values, rule.q_high)


def trim(propensities, groups, rule: SupportRule = SupportRule()) -> SupportReport:
    """Keep rows whose every propensity lies inside that column's common range.

    For column k the lower bound is the largest, over treatment groups, of
    the group's minimum (or low quantile) of p_k; the upper bound is the
    smallest group maximum (or high quantile). A row is dropped if any
    column is out of bounds.
    """
    p = np.asarray(propensities, dtype=float)
    g = np.asarray(groups).astype(np.int64)
    if p.ndim != 2 or p.shape[0] != g.shape[0]:
        raise ValueError("propensities must be n x K and match groups")
    if p.shape[0] and np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("propensity rows must sum to 1")
    labels = np.unique(g)
    for lab in range(p.shape[1]):
        if lab not in labels:
            raise ValueError(f"treatment group {lab} is empty")
    k = p.shape[1]
    lower, upper = np.empty(k), np.empty(k)
    keep = np.ones(p.shape[0], dtype=bool)
    collapsed, notes = [], []
    for col in range(k):
        bounds = [_group_bounds(p[g == lab, col], rule) for lab in labels]
        lower[col] = max(b[0] for b in bounds)
        upper[col] = min(b[1] for b in bounds)
        if lower[col] > upper[col]:
            msg = (f"support collapse on propensity column {col}: lower bound "
                   f"{lower[col]!r} exceeds upper bound {upper[col]!r}")
            warnings.warn(msg, SupportCollapseWarning, stacklevel=2)
            collapsed.append(col)
            notes.append(msg)
            keep[:] = False
            continue
        keep &= (p[:, col] >= lower[col]) & (p[:, col] <= upper[col])
    return SupportReport(keep, lower, upper, collapsed, notes)


def apply_bounds(propensities, report: SupportReport) -> np.ndarray:
    """Keep mask for new rows under an existing report's bounds."""
    p = np.asarray(propensities, dtype=float)
    ok = (p >= report.lower) & (p <= report.upper)
    return ok.all(axis=1)


@dataclass
class SupportDiagnostics:
    covariates: list[str]
    mean_kept: np.ndarray
    mean_dropped: np.ndarray
    std_diff: np.ndarray
    n_kept: int
    n_dropped: int
    report: DescriptiveReport
    notes: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [{"covariate": c, "mean_kept": float(self.mean_kept[j]),
                 "mean_dropped": float(self.mean_dropped[j]),
                 "std_diff": float(self.std_diff[j])}
                for j, c in enumerate(self.covariates)]

    def to_csv(self, path) -> None:
        write_table(path, self.rows(),
                    ["covariate", "mean_kept", "mean_dropped", "std_diff"])


def support_diagnostics(data: Dataset, report: SupportReport,
                        key_covariates: Sequence[str] | None = None) -> SupportDiagnostics:
    """Kept-versus-dropped covariate means and standardized differences."""
    if report.keep.shape[0] != data.n:
        raise ValueError("keep mask length does not match the data")
    covs = list(key_covariates) if key_covariates is not None else data.covariate_names
    x = data.x[:, [data.index_of(c) for c in covs]]
    labels = np.where(report.keep, 1, 0)
    rep = compare_groups(x, labels, [1, 0], 1, covs)
    notes = list(rep.notes)
    if report.n_dropped == 0:
        notes.append("no observations dropped; dropped column is empty")
    if report.n_dropped == data.n:
        notes.append("all observations dropped; kept column is empty")
    return SupportDiagnostics(covs, rep.means[1], rep.means[0], rep.std_diffs[0],
                              int(report.keep.sum()), report.n_dropped, rep, notes)
