"""Synthetic data with known ground truth, placebo designs and search oracles."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ColumnSpec, Dataset, write_table

ARM_NAMES = ("NP", "WS", "BC", "TC", "EP")


@dataclass(frozen=True)
class DgpSpec:
    """Multi-arm design with multinomial-logit selection and additive effects.

    Covariates are ``p`` standard normals followed by ``len(cat_levels)``
    uniform categorical codes. Arm d has linear index
    ``intercepts[d] + selection * sum_{j in selection_vars} coef[d, j] * x_j``
    with coefficients drawn from ``design_seed``, so replications that only
    change ``seed`` share one design. The outcome of arm d is
    ``f0(x) + tau_d(x) + noise`` with
    ``tau_d(x) = effect_const[d] + effect_slope[d] * x_0 + effect_cat[d] * c_0``.
    With ``months > 1`` each monthly outcome multiplies the effect by a
    lock-in profile: -1 up to ``lock_in`` months, +0.5 from ``recovery``
    months on, linear in between.
    """

    n: int = 2000
    p: int = 5
    cat_levels: tuple = ()
    n_arms: int = 2
    selection: float = 0.0
    selection_vars: tuple = (0, 1, 2)
    intercepts: tuple | None = None
    baseline: tuple = (0.5, 0.5, 0.0)          # coefficients on x_0, x_1, x_2
    effect_const: tuple = (0.0, 1.0)
    effect_slope: tuple = (0.0, 0.0)
    effect_cat: tuple = (0.0, 0.0)
    effect_extra: tuple = ()                    # ((arm, var, coef), ...) slopes on other x
    noise_sd: float = 1.0
    heteroskedastic: bool = False
    months: int = 1
    lock_in: int = 6
    recovery: int = 24
    horizon: int = 6
    seed: int = 0
    design_seed: int = 0                        # fixes the selection coefficients

    def __post_init__(self):
        k = self.n_arms
        for name in ("effect_const", "effect_slope", "effect_cat"):
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} needs one entry per arm")
            if getattr(self, name)[0] != 0.0:
                raise ValueError(f"{name}[0] must be 0: arm 0 is the reference")
        if self.intercepts is not None and len(self.intercepts) != k:
            raise ValueError("intercepts need one entry per arm")
        if self.n < 0 or self.p < 1 or k < 1:
            raise ValueError("need n >= 0, p >= 1 and at least one arm")
        if self.effect_cat and any(self.effect_cat) and not self.cat_levels:
            raise ValueError("categorical effects need a categorical covariate")


@dataclass
class Truth:
    propensities: np.ndarray       # (n, K)
    tau: np.ndarray                # (n, K) effect of arm d against arm 0, outcome 0
    potential: np.ndarray          # (n, K) or (n, K, months)
    start_month: np.ndarray
    duration: np.ndarray

    def ate(self, contrast=(1, 0)) -> float:
        return float(np.mean(self.tau[:, contrast[0]] - self.tau[:, contrast[1]]))

    def rows(self, ids) -> list[dict]:
        k = self.tau.shape[1]
        out = []
        for i, rid in enumerate(ids):
            row = {"id": rid}
            for a in range(k):
                row[f"p_{a}"] = float(self.propensities[i, a])
            for a in range(k):
                row[f"tau_{a}"] = float(self.tau[i, a])
            if self.potential.ndim == 2:
                for a in range(k):
                    row[f"y_{a}"] = float(self.potential[i, a])
            else:
                for t in range(self.potential.shape[2]):
                    for a in range(k):
                        row[f"y_{a}_m{t + 1}"] = float(self.potential[i, a, t])
            out.append(row)
        return out

    def to_csv(self, path, ids) -> None:
        rows = self.rows(ids)
        write_table(path, rows, list(rows[0].keys()) if rows else ["id"])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def lock_in_profile(months: int, lock_in: int = 6, recovery: int = 24) -> np.ndarray:
    t = np.arange(1, months + 1, dtype=float)
    prof = np.where(t <= lock_in, -1.0, 0.5)
    mid = (t > lock_in) & (t < recovery)
    prof[mid] = -1.0 + 1.5 * (t[mid] - lock_in) / (recovery - lock_in)
    return prof


def schema_for(spec: DgpSpec) -> list[ColumnSpec]:
    cols = [ColumnSpec("id", roles=("id",))]
    for j in range(spec.p):
        cols.append(ColumnSpec(f"x{j}", "continuous",
                               ("confounder", "heterogeneity", "policy")))
    for j, lv in enumerate(spec.cat_levels):
        cols.append(ColumnSpec(f"c{j}", "unordered",
                               ("confounder", "heterogeneity", "policy"), lv))
    cols.append(ColumnSpec("d", "unordered", ("treatment",), spec.n_arms))
    if spec.months > 1:
        cols += [ColumnSpec(f"y{t + 1}", roles=("outcome",)) for t in range(spec.months)]
    else:
        cols.append(ColumnSpec("y", roles=("outcome",)))
    cols += [ColumnSpec("start_month", roles=("auxiliary",)),
             ColumnSpec("duration", roles=("auxiliary",))]
    return cols


def generate(spec: DgpSpec, placebo: bool = False) -> tuple[Dataset, Truth]:
    """Draw a dataset and its ground truth; reproducible given ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 0x4447])
    n, k = spec.n, spec.n_arms
    xc = rng.standard_normal((n, spec.p))
    xk = np.column_stack([rng.integers(0, lv, n) for lv in spec.cat_levels]) \
        if spec.cat_levels else np.zeros((n, 0))
    x = np.column_stack([xc, xk]).astype(float)

    coef = np.random.default_rng([spec.design_seed, 0x434F]).uniform(
        -1.0, 1.0, size=(k, spec.p))
    coef[0] = 0.0
    sel = np.zeros(spec.p, dtype=bool)
    sel[[j for j in spec.selection_vars if j < spec.p]] = True
    index = spec.selection * (xc * sel) @ coef.T
    if spec.intercepts is not None:
        index = index + np.asarray(spec.intercepts, dtype=float)
    prop = _softmax(index)
    u = rng.random(n)
    d = np.minimum((u[:, None] > np.cumsum(prop, axis=1)).sum(axis=1), k - 1)

    base = np.zeros(n)
    for j, b in enumerate(spec.baseline[:spec.p]):
        base += b * xc[:, j]
    tau = np.zeros((n, k))
    if not placebo:
        for a in range(k):
            tau[:, a] = spec.effect_const[a] + spec.effect_slope[a] * xc[:, 0]
            if spec.cat_levels:
                tau[:, a] += spec.effect_cat[a] * xk[:, 0]
        for arm, var, c in spec.effect_extra:
            tau[:, arm] += c * x[:, var]
    sd = spec.noise_sd * (1.0 + 0.5 * np.abs(xc[:, 0]) if spec.heteroskedastic else
                          np.ones(n))
    if spec.months > 1:
        prof = lock_in_profile(spec.months, spec.lock_in, spec.recovery)
        noise = rng.standard_normal((n, spec.months)) * sd[:, None]
        pot = base[:, None, None] + tau[:, :, None] * prof[None, None, :] \
            + noise[:, None, :]
        y = pot[np.arange(n), d]
    else:
        noise = rng.standard_normal(n) * sd
        pot = base[:, None] + tau + noise[:, None]
        y = pot[np.arange(n), d]

    start = np.clip(1 + np.floor(spec.horizon * rng.random(n) * (1 + (xc[:, 0] > 0)) / 2),
                    1, spec.horizon)
    duration = np.floor(rng.exponential(12.0, n))
    schema = schema_for(spec)
    data = Dataset(schema, x, d, y, ids=np.arange(n),
                   aux={"start_month": start, "duration": duration})
    return data, Truth(prop, tau, pot, start, duration)


def generate_placebo(spec: DgpSpec) -> tuple[Dataset, Truth]:
    """Selection on covariates as in ``spec`` but no effect of any arm."""
    return generate(spec, placebo=True)


def five_arm_monthly(n: int = 4000, months: int = 36, seed: int = 0) -> DgpSpec:
    """Five arms with lock-in-then-recovery monthly effects (shape only)."""
    return DgpSpec(n=n, p=5, cat_levels=(3,), n_arms=5, selection=0.5,
                   intercepts=(1.5, 0.3, 0.0, 0.0, -0.8),
                   effect_const=(0.0, 0.03, 0.05, 0.04, 0.06),
                   effect_slope=(0.0, 0.02, 0.0, -0.02, 0.03),
                   effect_cat=(0.0, 0.0, 0.02, 0.0, -0.01),
                   baseline=(0.1, 0.05, 0.0), noise_sd=0.3, months=months, seed=seed)


# --------------------------------------------------------------------------
# brute-force policy tree oracle

@dataclass
class OracleResult:
    feasible: bool
    value: float
    assignment: np.ndarray | None
    tree: object = None
    n_trees: int = 0
    notes: list = field(default_factory=list)


def _enumerate(rows, v, depth):
    """Yield (structure, list of leaf row sets) for every tree up to ``depth``."""
    yield ("leaf",), [rows]
    if depth == 0:
        return
    for j in range(v.shape[1]):
        vals = np.unique(v[rows, j])
        for a, b in zip(vals[:-1], vals[1:]):
            t = (a + b) / 2
            left = rows[v[rows, j] <= t]
            right = rows[v[rows, j] > t]
            for ls, lleaves in _enumerate(left, v, depth - 1):
                for rs, rleaves in _enumerate(right, v, depth - 1):
                    yield ("split", j, t, ls, rs), lleaves + rleaves


def brute_force_tree_oracle(scores, features, depth: int, max_shares: Sequence | None = None,
                            max_rows: int = 200, max_features: int = 4,
                            max_values: int = 8) -> OracleResult:
    """Best tree by listing every structure and every leaf assignment.

    Leaf values are summed leaf by leaf in tree order. Caps are maximum
    shares per arm (``None`` for no cap); the allowed count is
    ``floor(share * n + 1e-9)``.
    """
    theta = np.asarray(scores, dtype=float)
    v = np.asarray(features, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    n, k = theta.shape
    if depth > 2:
        raise ValueError("oracle supports depth <= 2")
    if n > max_rows or v.shape[1] > max_features:
        raise ValueError("instance too large for the oracle")
    if any(np.unique(v[:, j]).size > max_values for j in range(v.shape[1])):
        raise ValueError("too many distinct values for the oracle")
    caps = [None] * k if max_shares is None else list(max_shares)
    limit = [None if c is None else int(np.floor(c * n + 1e-9)) for c in caps]
    best = OracleResult(False, -np.inf, None, notes=["no feasible tree"])
    count = 0
    for structure, leaves in _enumerate(np.arange(n), v, depth):
        sums = [theta[rows].sum(axis=0) for rows in leaves]
        sizes = [rows.size for rows in leaves]
        for arms in np.ndindex(*([k] * len(leaves))):
            count += 1
            used = np.zeros(k, dtype=np.int64)
            for a, s in zip(arms, sizes):
                used[a] += s
            if any(lim is not None and used[a] > lim for a, lim in enumerate(limit)):
                continue
            value = 0.0
            for a, s in zip(arms, sums):
                value = value + s[a]
            if value > best.value:
                assign = np.empty(n, dtype=np.int64)
                for a, rows in zip(arms, leaves):
                    assign[rows] = a
                best = OracleResult(True, float(value), assign, (structure, arms))
    best.n_trees = count
    if not best.feasible:
        best.value = float("nan")
    return best


def with_seed(spec: DgpSpec, seed: int) -> DgpSpec:
    return replace(spec, seed=seed)


# --------------------------------------------------------------------------
# naive per-definition oracles

def naive_trim(propensities, groups, variant: str = "minmax", q_low: float = 0.0,
               q_high: float = 1.0) -> np.ndarray:
    """Keep mask from a row-by-row reading of the trimming rule.

    For each propensity column and each treatment group the group's lower
    and upper statistic is taken from its sorted values (nearest rank for
    quantiles); the column bound is the largest lower and smallest upper
    statistic; a row survives only if every column lies inside its bound.
    """
    p = [list(map(float, row)) for row in np.asarray(propensities)]
    g = [int(v) for v in groups]
    n, k = len(p), len(p[0]) if p else 0
    labels = sorted(set(g))
    lows, highs = [], []
    for col in range(k):
        lo_best, hi_best = -np.inf, np.inf
        for lab in labels:
            vals = sorted(p[i][col] for i in range(n) if g[i] == lab)
            m = len(vals)
            if variant == "minmax":
                lo, hi = vals[0], vals[-1]
            else:
                rank_lo = max(1, int(np.ceil(q_low * m - 1e-12)))
                rank_hi = max(1, int(np.ceil(q_high * m - 1e-12)))
                lo, hi = vals[rank_lo - 1], vals[rank_hi - 1]
            lo_best = max(lo_best, lo)
            hi_best = min(hi_best, hi)
        lows.append(lo_best)
        highs.append(hi_best)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        for col in range(k):
            if not lows[col] <= p[i][col] <= highs[col]:
                keep[i] = False
    return keep


def naive_std_diff(a, b) -> float:
    """|mean(a) - mean(b)| / sqrt((var(a) + var(b)) / 2) * 100 with explicit sums."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((v - ma) ** 2 for v in a) / (len(a) - 1)
    vb = sum((v - mb) ** 2 for v in b) / (len(b) - 1)
    return abs(ma - mb) / ((va + vb) / 2) ** 0.5 * 100
