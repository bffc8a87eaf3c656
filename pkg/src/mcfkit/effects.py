"""Treatment effects at every aggregation level from forest weights.

Every estimand here is linear in the estimation-sample outcomes: an
aggregate is a set of prediction rows with row weights r, and the
estimate is ``sum_j g_j * y_j`` where ``g = (r @ W)`` signed by the arm of
row j (+1 for d, -1 for d'). The variance is ``sum_j g_j**2 * e_j**2`` with
e_j the leave-one-out forest residual of estimation row j. Arms use
disjoint estimation rows, so the contrast variance has no covariance term.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, write_table
from .mcf import CausalForest, ForestWeights


class EstimationError(RuntimeError):
    """Too many prediction rows without a complete leaf."""


class CoverageWarning(UserWarning):
    """A balancing cell is empty within some heterogeneity cell."""


def stars(pvalue: float) -> str:
    if not math.isfinite(pvalue):
        return ""
    if pvalue < 0.01:
        return "***"
    if pvalue < 0.05:
        return "**"
    if pvalue < 0.10:
        return "*"
    return ""


def normal_pvalue(estimate: float, se: float) -> float:
    """Two-sided p-value of estimate / se under a standard normal."""
    if se > 0:
        return math.erfc(abs(estimate / se) / math.sqrt(2.0))
    return 1.0 if estimate == 0 else 0.0


@dataclass(frozen=True)
class EffectEstimate:
    kind: str
    contrast: tuple[int, int]
    estimate: float
    se: float
    pvalue: float
    n_effective: int
    cell: object = None
    outcome: str | None = None

    @property
    def stars(self) -> str:
        return stars(self.pvalue)

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        from statistics import NormalDist
        z = NormalDist().inv_cdf(0.5 + level / 2)
        return self.estimate - z * self.se, self.estimate + z * self.se

    def row(self) -> dict:
        return {"estimand": self.kind, "contrast": contrast_label(self.contrast),
                "cell": "" if self.cell is None else self.cell,
                "outcome": self.outcome or "", "estimate": self.estimate,
                "se": self.se, "pvalue": self.pvalue, "stars": self.stars}


TABLE_COLUMNS = ["estimand", "contrast", "cell", "outcome", "estimate", "se",
                 "pvalue", "stars"]


def contrast_label(contrast) -> str:
    return f"{contrast[0]}-{contrast[1]}"


def write_effects(path, estimates: Sequence[EffectEstimate]) -> None:
    write_table(path, [e.row() for e in estimates], TABLE_COLUMNS)


# --------------------------------------------------------------------------
# shared machinery

@dataclass
class _Context:
    forest: CausalForest
    fw: ForestWeights
    outcome: int

    @property
    def y(self):
        return self.forest.est_y[:, self.outcome]

    @property
    def e(self):
        return self.forest.residuals(self.outcome)

    @property
    def outcome_name(self):
        names = self.forest.outcome_names
        return names[self.outcome] if names else str(self.outcome)


def _context(forest, data: Dataset, outcome: int, max_undefined_share: float) -> _Context:
    if data.n == 0:
        raise ValueError("no prediction rows")
    fw = forest.weights(data.x)
    bad = int(np.sum(~fw.defined))
    if bad / data.n > max_undefined_share:
        raise EstimationError(f"{bad} of {data.n} prediction rows have no complete "
                              "leaf in any tree")
    return _Context(forest, fw, outcome)


def _signs(forest: CausalForest, contrast) -> np.ndarray:
    d1, d0 = contrast
    if d1 == d0:
        raise ValueError("contrast needs two different arms")
    for a in contrast:
        if not 0 <= a < forest.n_arms:
            raise ValueError(f"arm {a} outside 0..{forest.n_arms - 1}")
    s = np.zeros(forest.n_est)
    s[forest.est_d == d1] = 1.0
    s[forest.est_d == d0] = -1.0
    return s


def _linear(ctx: _Context, r: np.ndarray, contrast) -> tuple[float, float]:
    g = (r @ ctx.fw.w) * _signs(ctx.forest, contrast)
    est = float(g @ ctx.y)
    var = float(np.sum(g * g * ctx.e * ctx.e))
    return est, math.sqrt(var)


def _mean_weights(mask: np.ndarray, defined: np.ndarray) -> np.ndarray:
    use = mask & defined
    r = np.zeros(mask.shape[0])
    if use.any():
        r[use] = 1.0 / use.sum()
    return r


def _estimate(ctx, r, contrast, kind, cell=None, n=None) -> EffectEstimate:
    est, se = _linear(ctx, r, contrast)
    n = int(np.count_nonzero(r)) if n is None else n
    return EffectEstimate(kind, tuple(contrast), est, se, normal_pvalue(est, se),
                          n, cell, ctx.outcome_name)


# --------------------------------------------------------------------------
# estimands

def ate(forest: CausalForest, data: Dataset, contrast=(1, 0), outcome: int = 0,
        max_undefined_share: float = 0.05) -> EffectEstimate:
    """Average of IATEs over all prediction rows."""
    ctx = _context(forest, data, outcome, max_undefined_share)
    r = _mean_weights(np.ones(data.n, dtype=bool), ctx.fw.defined)
    return _estimate(ctx, r, contrast, "ATE")


def atet(forest: CausalForest, data: Dataset, contrast=(1, 0), treated: int | None = None,
         outcome: int = 0, max_undefined_share: float = 0.05) -> EffectEstimate:
    """Average of IATEs over rows observed in arm ``treated`` (default contrast[0])."""
    treated = contrast[0] if treated is None else treated
    mask = data.d == treated
    if not mask.any():
        raise ValueError(f"no prediction rows in arm {treated}")
    ctx = _context(forest, data, outcome, max_undefined_share)
    r = _mean_weights(mask, ctx.fw.defined)
    return _estimate(ctx, r, contrast, f"ATET({treated})")


def iate_table(forest: CausalForest, data: Dataset, contrasts, outcome: int = 0) -> list[dict]:
    """One row per prediction row with potential outcomes and IATEs with SEs."""
    fw = forest.weights(data.x)
    y = forest.est_y[:, outcome]
    e2 = forest.residuals(outcome) ** 2
    mu = fw.mu(y)
    out = []
    ids = data.ids if data.ids is not None else np.arange(data.n)
    per_contrast = []
    for c in contrasts:
        g = fw.w * _signs(forest, c)
        est = g @ y
        se = np.sqrt((g * g) @ e2)
        est[~fw.defined] = np.nan
        se[~fw.defined] = np.nan
        per_contrast.append((c, est, se))
    for i in range(data.n):
        row = {"id": ids[i]}
        for a in range(forest.n_arms):
            row[f"mu_{a}"] = float(mu[i, a])
        for c, est, se in per_contrast:
            row[f"iate_{contrast_label(c)}"] = float(est[i])
            row[f"se_{contrast_label(c)}"] = float(se[i])
        out.append(row)
    return out


def iates(forest: CausalForest, x, contrasts, outcome: int = 0) -> np.ndarray:
    """(n, len(contrasts)) IATE matrix for clustering and policy scores."""
    mu = forest.weights(x).mu(forest.est_y[:, outcome])
    return np.column_stack([mu[:, c[0]] - mu[:, c[1]] for c in contrasts])


def discretize(values, n_bins: int = 10, max_levels: int = 10) -> np.ndarray:
    """Cell codes: values kept as-is when few distinct levels, else decile bins."""
    v = np.asarray(values, dtype=float)
    levels = np.unique(v)
    if levels.size <= max_levels:
        return v
    edges = np.unique(np.quantile(v, np.linspace(0, 1, n_bins + 1)[1:-1]))
    return np.searchsorted(edges, v, side="left").astype(float)


@dataclass
class GroupEffects:
    kind: str
    z: str
    cells: list
    shares: np.ndarray
    estimates: list[EffectEstimate]
    deltas: list[EffectEstimate]
    overall: EffectEstimate
    notes: list[str] = field(default_factory=list)

    def all(self) -> list[EffectEstimate]:
        return [self.overall] + self.estimates + self.deltas

    def weighted_mean(self) -> float:
        return float(sum(s * e.estimate for s, e in zip(self.shares, self.estimates)))


def _cell_codes(data: Dataset, names: Sequence[str], discretize_continuous: bool):
    if not names:
        return np.zeros(data.n, dtype=np.int64), [()]
    cols = []
    for nm in names:
        col = data.column(nm)
        if discretize_continuous:
            col = discretize(col)
        cols.append(col)
    stacked = np.column_stack(cols)
    uniq, codes = np.unique(stacked, axis=0, return_inverse=True)
    return codes.ravel(), [tuple(float(v) for v in u) for u in uniq]


def bgate(forest: CausalForest, data: Dataset, contrast=(1, 0), z: str = "",
          balancing: Sequence[str] = (), outcome: int = 0,
          discretize_continuous: bool = True,
          max_undefined_share: float = 0.05) -> GroupEffects:
    """Balanced group effects per cell of ``z``.

    Within every z cell, IATEs are averaged per cell of the balancing
    variables and combined with the pooled balancing-cell shares, so each
    z cell is evaluated at the same balancing distribution. With no
    balancing variables this is the plain GATE.
    """
    ctx = _context(forest, data, outcome, max_undefined_share)
    defined = ctx.fw.defined
    zcol = data.column(z)
    zc = discretize(zcol) if discretize_continuous else np.asarray(zcol, dtype=float)
    zcells = np.unique(zc[defined])
    wcodes, _ = _cell_codes(data, balancing, discretize_continuous)
    n_def = defined.sum()
    wshare = np.bincount(wcodes[defined], minlength=wcodes.max() + 1) / n_def
    kind = "BGATE" if balancing else "GATE"
    notes = []
    r_all = _mean_weights(np.ones(data.n, dtype=bool), defined)
    overall = _estimate(ctx, r_all, contrast, "ATE")
    estimates, deltas, shares = [], [], []
    for cell in zcells:
        in_z = (zc == cell) & defined
        r = np.zeros(data.n)
        covered = 0.0
        for w in np.flatnonzero(wshare > 0):
            m = in_z & (wcodes == w)
            if not m.any():
                continue
            r[m] += wshare[w] * (1.0 / m.sum())
            covered += wshare[w]
        if covered < 1.0 - 1e-12:
            msg = (f"{z}={cell!r}: balancing cells covering share "
                   f"{1 - covered:.4f} are empty; shares renormalized")
            notes.append(msg)
            warnings.warn(msg, CoverageWarning, stacklevel=2)
            r /= covered
        cell_val = _cell_value(cell)
        estimates.append(_estimate(ctx, r, contrast, kind, cell_val, int(in_z.sum())))
        deltas.append(_estimate(ctx, r - r_all, contrast, f"{kind}-ATE", cell_val,
                                int(in_z.sum())))
        shares.append(in_z.sum() / n_def)
    return GroupEffects(kind, z, [_cell_value(c) for c in zcells], np.array(shares),
                        estimates, deltas, overall, notes)


def gate(forest: CausalForest, data: Dataset, contrast=(1, 0), z: str = "",
         outcome: int = 0, discretize_continuous: bool = True,
         max_undefined_share: float = 0.05) -> GroupEffects:
    """Group effects per cell of ``z`` plus their differences to the ATE."""
    return bgate(forest, data, contrast, z, (), outcome, discretize_continuous,
                 max_undefined_share)


def _cell_value(c):
    c = float(c)
    return int(c) if c.is_integer() else c


@dataclass
class EffectCurve:
    contrast: tuple[int, int]
    months: list[int]
    estimates: list[EffectEstimate]

    @property
    def significant(self) -> list[bool]:
        return [e.pvalue < 0.05 for e in self.estimates]

    def rows(self) -> list[dict]:
        return [{"month": m, "estimate": e.estimate, "se": e.se,
                 "lower": e.estimate - 1.96 * e.se, "upper": e.estimate + 1.96 * e.se,
                 "pvalue": e.pvalue, "significant": s}
                for m, e, s in zip(self.months, self.estimates, self.significant)]

    def to_csv(self, path) -> None:
        write_table(path, self.rows(), ["month", "estimate", "se", "lower",
                                        "upper", "pvalue", "significant"])


def effect_curve(forest: CausalForest, data: Dataset, contrast=(1, 0),
                 outcomes: Sequence[int] | None = None,
                 max_undefined_share: float = 0.05) -> EffectCurve:
    """ATE for each outcome column, read as consecutive months."""
    outcomes = list(range(forest.est_y.shape[1])) if outcomes is None else list(outcomes)
    ests = [ate(forest, data, contrast, k, max_undefined_share) for k in outcomes]
    return EffectCurve(tuple(contrast), [k + 1 for k in range(len(outcomes))], ests)
