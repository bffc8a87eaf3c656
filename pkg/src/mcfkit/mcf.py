"""Modified causal forest.

Honest multi-arm trees: the structure is grown on a training sample with
a splitting rule that targets the MSE of the IATE,

    sum over arm pairs (m, l) of  MSE_m + MSE_l - 2 * MCE_{m,l}

plus a penalty for daughters with similar treatment shares. Leaves are
filled with a separate estimation sample, and every prediction is a
weighted average of estimation-sample outcomes.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .data import Dataset, write_table
from .forest import ForestParams, default_mtry, fit_regression
from .trees import Tree, apply_tree, default_jobs, tree_rng

FOREST_VERSION = 1


class UndefinedPredictionError(ValueError):
    """No tree has a complete leaf for the requested arms at this point."""


@dataclass(frozen=True)
class McfParams:
    n_trees: int = 1000
    mtry: int | None = None
    min_leaf: int = 12          # per treatment arm, on the training rows
    penalty_weight: float | None = None   # None: outcome variance of the node
    nn_count: int = 1
    subsample: float = 0.5
    max_depth: int | None = None
    outcome: int = 0            # outcome column that drives the splits
    seed: int = 0

    def validate(self, p: int) -> int:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.penalty_weight is not None and self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")
        if self.nn_count != 1:
            raise ValueError("only nn_count=1 (single nearest neighbour) is supported")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        mtry = default_mtry(p) if self.mtry is None else self.mtry
        if not 1 <= mtry <= p:
            raise ValueError(f"mtry must lie in [1, {p}], got {mtry}")
        return mtry


# --------------------------------------------------------------------------
# matching metric

def standardize_node(x: np.ndarray, kinds) -> tuple[np.ndarray, np.ndarray]:
    """Split node covariates into standardized numeric and categorical parts.

    Continuous and ordered columns are centred and scaled by their
    within-node standard deviation (constant columns are dropped);
    unordered columns are kept as codes for Hamming distance.
    """
    num = [j for j, k in enumerate(kinds) if k != "unordered"]
    cat = [j for j, k in enumerate(kinds) if k == "unordered"]
    z = x[:, num]
    sd = z.std(axis=0)
    keep = sd > 0
    z = (z[:, keep] - z[:, keep].mean(axis=0)) / sd[keep]
    return np.ascontiguousarray(z), np.ascontiguousarray(x[:, cat])


def node_distances(x: np.ndarray, kinds) -> np.ndarray:
    """Squared standardized Euclidean plus Hamming distance between node rows."""
    z, c = standardize_node(np.asarray(x, dtype=float), kinds)
    m = z.shape[0]
    out = np.zeros((m, m))
    for f in range(z.shape[1]):
        diff = z[:, f][:, None] - z[:, f][None, :]
        out += diff * diff
    for f in range(c.shape[1]):
        out += (c[:, f][:, None] != c[:, f][None, :])
    return out


@numba.njit(cache=True, nogil=True)
def _pair_distances(z, c):
    m = z.shape[0]
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            acc = 0.0
            for f in range(z.shape[1]):
                diff = z[i, f] - z[j, f]
                acc += diff * diff
            for f in range(c.shape[1]):
                if c[i, f] != c[j, f]:
                    acc += 1.0
            out[i, j] = acc
            out[j, i] = acc
    return out


# --------------------------------------------------------------------------
# reference split objective

def _nearest(dist_row, candidates):
    # lowest distance, ties to the lowest node row index
    best = candidates[0]
    for c in candidates[1:]:
        if dist_row[c] < dist_row[best]:
            best = c
    return best


def _daughter_score(rows, y, d, arms, dist) -> float:
    dy = d[rows]
    means = {a: y[rows[dy == a]].mean() for a in arms}
    mse = {a: np.mean((y[rows[dy == a]] - means[a]) ** 2) for a in arms}
    if len(arms) == 1:
        return float(mse[arms[0]])
    score = 0.0
    for i, m_arm in enumerate(arms):
        for l_arm in arms[i + 1:]:
            prods = []
            for r in rows[(dy == m_arm) | (dy == l_arm)]:
                other = l_arm if d[r] == m_arm else m_arm
                nb = _nearest(dist[r], rows[dy == other])
                res_r = y[r] - means[d[r]]
                res_nb = y[nb] - means[other]
                prods.append(res_r * res_nb)
            mce = float(np.mean(prods))
            score += mse[m_arm] + mse[l_arm] - 2.0 * mce
    return score


def split_objective(x, y, d, left, kinds=None, penalty_weight: float = 0.0,
                    min_leaf: int = 1) -> float:
    """Score of splitting a node into ``left`` and its complement; lower is better.

    For each daughter the score sums, over all pairs of arms present in the
    node, the within-arm mean squared deviations of both arms minus twice
    their mean correlated error. The correlated error pairs every row's
    residual with the residual of its nearest neighbour (by node-standardized
    covariates) from the other arm inside the same daughter. Daughters are
    weighted by their share of node rows, and
    ``penalty_weight * (1 - 0.5 * sum_d |share_d(left) - share_d(right)|)``
    is added. Returns ``inf`` when a daughter has fewer than ``min_leaf``
    rows of any arm present in the node.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = np.asarray(d).astype(np.int64)
    left = np.asarray(left, dtype=bool)
    kinds = tuple(kinds) if kinds is not None else ("continuous",) * x.shape[1]
    arms = sorted(set(d.tolist()))
    dist = node_distances(x, kinds)
    m = y.shape[0]
    lrows, rrows = np.flatnonzero(left), np.flatnonzero(~left)
    for rows in (lrows, rrows):
        for a in arms:
            if np.sum(d[rows] == a) < min_leaf:
                return math.inf
    total = 0.0
    shares = []
    for rows in (lrows, rrows):
        total += rows.size / m * _daughter_score(rows, y, d, arms, dist)
        shares.append(np.array([np.mean(d[rows] == a) for a in arms]))
    similarity = 1.0 - 0.5 * np.abs(shares[0] - shares[1]).sum()
    return float(total + penalty_weight * similarity)


# --------------------------------------------------------------------------
# fast split search

@numba.njit(cache=True, nogil=True)
def _prefix_stats(order, d, y, dist, n_arms):
    """Running sums for every prefix of ``order``.

    Row r at position i joins the prefixes t >= i. Its nearest arm-l row
    within the prefix only changes when a closer one enters, so its
    contributions to the sums of y_r * y_nb and y_nb are recorded as
    deltas at those positions and accumulated at the end.
    """
    m = order.shape[0]
    cnt = np.zeros((n_arms, m))
    sy = np.zeros((n_arms, m))
    syy = np.zeros((n_arms, m))
    sprod = np.zeros((n_arms, n_arms, m))
    snb = np.zeros((n_arms, n_arms, m))
    for t in range(m):
        r = order[t]
        a = d[r]
        if t > 0:
            for k in range(n_arms):
                cnt[k, t] = cnt[k, t - 1]
                sy[k, t] = sy[k, t - 1]
                syy[k, t] = syy[k, t - 1]
        cnt[a, t] += 1.0
        sy[a, t] += y[r]
        syy[a, t] += y[r] * y[r]
    # rows of each arm in scan order: positions, node ids and outcomes
    arm_start = np.zeros(n_arms + 1, dtype=np.int64)
    for t in range(m):
        arm_start[d[order[t]] + 1] += 1
    for k in range(n_arms):
        arm_start[k + 1] += arm_start[k]
    fill = arm_start[:-1].copy()
    arm_pos = np.empty(m, dtype=np.int64)
    arm_row = np.empty(m, dtype=np.int64)
    for t in range(m):
        c = order[t]
        k = d[c]
        arm_pos[fill[k]] = t
        arm_row[fill[k]] = c
        fill[k] += 1
    ptr = arm_start[:-1].copy()      # first arm-k entry beyond position i
    for i in range(m):
        r = order[i]
        a = d[r]
        yr = y[r]
        drow = dist[r]
        ptr[a] += 1
        for k in range(n_arms):
            if k == a:
                continue
            best = np.inf
            bid = -1
            nb = 0.0
            for q in range(arm_start[k], ptr[k]):
                c = arm_row[q]
                dd = drow[c]
                if dd < best or (dd == best and c < bid):
                    best = dd
                    bid = c
            if bid >= 0:
                nb = y[bid]
                # row r enters at i with its current neighbour
                sprod[a, k, i] += yr * nb
                snb[a, k, i] += nb
            for q in range(ptr[k], arm_start[k + 1]):
                c = arm_row[q]
                dd = drow[c]
                if dd < best or (dd == best and c < bid):
                    best = dd
                    bid = c
                    t = arm_pos[q]
                    delta = y[c] - nb
                    sprod[a, k, t] += yr * delta
                    snb[a, k, t] += delta
                    nb = y[c]
    for a in range(n_arms):
        for k in range(n_arms):
            for t in range(1, m):
                sprod[a, k, t] += sprod[a, k, t - 1]
                snb[a, k, t] += snb[a, k, t - 1]
    return cnt, sy, syy, sprod, snb


@numba.njit(cache=True, nogil=True)
def _daughter_scores(cnt, sy, syy, sprod, snb, present):
    n_arms, m = cnt.shape
    out = np.empty(m)
    for t in range(m):
        score = 0.0
        n_present = 0
        single = -1
        for a in range(n_arms):
            if present[a]:
                n_present += 1
                single = a
        empty = False
        for a in range(n_arms):
            if present[a] and cnt[a, t] == 0:
                empty = True
        if empty:
            out[t] = np.inf
            continue
        if n_present == 1:
            mu = sy[single, t] / cnt[single, t]
            out[t] = syy[single, t] / cnt[single, t] - mu * mu
            continue
        for a in range(n_arms):
            if not present[a]:
                continue
            for b in range(a + 1, n_arms):
                if not present[b]:
                    continue
                mu_a = sy[a, t] / cnt[a, t]
                mu_b = sy[b, t] / cnt[b, t]
                mse_a = syy[a, t] / cnt[a, t] - mu_a * mu_a
                mse_b = syy[b, t] / cnt[b, t] - mu_b * mu_b
                mce = ((sprod[a, b, t] - mu_a * snb[a, b, t])
                       + (sprod[b, a, t] - mu_b * snb[b, a, t])) \
                    / (cnt[a, t] + cnt[b, t])
                score += mse_a + mse_b - 2.0 * mce
        out[t] = score
    return out


@numba.njit(cache=True, nogil=True)
def _scan_feature(order, xs, d, y, dist, n_arms, present, min_leaf, lam):
    """Split score after every sorted position (inf where invalid)."""
    m = order.shape[0]
    cl, syl, syyl, spl, snl = _prefix_stats(order, d, y, dist, n_arms)
    rev = order[::-1].copy()
    cr, syr, syyr, spr, snr = _prefix_stats(rev, d, y, dist, n_arms)
    left = _daughter_scores(cl, syl, syyl, spl, snl, present)
    right = _daughter_scores(cr, syr, syyr, spr, snr, present)
    out = np.full(m - 1, np.inf)
    for t in range(m - 1):
        if not xs[t] < xs[t + 1]:
            continue
        s = m - 2 - t           # right daughter = reversed prefix ending here
        ok = True
        for a in range(n_arms):
            if present[a] and (cl[a, t] < min_leaf or cr[a, s] < min_leaf):
                ok = False
                break
        if not ok:
            continue
        nl = t + 1.0
        nr = m - nl
        sim = 0.0
        for a in range(n_arms):
            if present[a]:
                sim += abs(cl[a, t] / nl - cr[a, s] / nr)
        sim = 1.0 - 0.5 * sim
        out[t] = nl / m * left[t] + nr / m * right[s] + lam * sim
    return out


def _category_ranks(codes, y):
    cats = np.unique(codes)
    score = np.array([y[codes == c].mean() for c in cats])
    ordered = cats[np.lexsort((cats, score))]
    lookup = {c: i for i, c in enumerate(ordered)}
    return np.array([lookup[c] for c in codes], dtype=float), ordered


def best_split(x, y, d, kinds, features, n_arms, min_leaf, lam):
    """Lowest-score split over ``features``; ties go to the lowest feature
    index, then the lowest threshold. Returns None when nothing is valid."""
    m = y.shape[0]
    present = np.bincount(d, minlength=n_arms) > 0
    z, c = standardize_node(x, kinds)
    dist = _pair_distances(z, c)
    yc = y - y.mean()
    best = None
    for j in features:
        col = x[:, j]
        cat_order = None
        if kinds[j] == "unordered":
            col, cat_order = _category_ranks(col, yc)
        order = np.argsort(col, kind="stable").astype(np.int64)
        xs = col[order]
        if xs[0] == xs[-1]:
            continue
        scores = _scan_feature(order, xs, d, yc, dist, n_arms, present,
                               float(min_leaf), float(lam))
        t = int(np.argmin(scores))
        if not np.isfinite(scores[t]):
            continue
        if best is None or scores[t] < best[0]:
            if cat_order is not None:
                split = ("set", cat_order[: int(xs[t]) + 1].tolist())
            else:
                split = ("le", 0.5 * (xs[t] + xs[t + 1]))
            best = (float(scores[t]), int(j), split, order[: t + 1], order[t + 1:])
    return best


def _grow(x, y, d, kinds, rows, n_arms, mtry, params: McfParams, rng) -> Tree:
    tree = Tree.empty()
    stack = [(rows, tree.add_node(), 0)]
    p = x.shape[1]
    while stack:
        node_rows, node, depth = stack.pop()
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        counts = np.bincount(d[node_rows], minlength=n_arms)
        if np.any(counts < 2 * params.min_leaf):
            continue
        yn = y[node_rows]
        lam = yn.var() if params.penalty_weight is None else params.penalty_weight
        feats = np.sort(rng.choice(p, size=mtry, replace=False))
        found = best_split(x[node_rows], yn, d[node_rows], kinds, feats,
                           n_arms, params.min_leaf, lam)
        if found is None:
            continue
        _, j, split, lpos, rpos = found
        left, right = tree.split(node, j, split)
        stack.append((node_rows[rpos], right, depth + 1))
        stack.append((node_rows[lpos], left, depth + 1))
    return tree.finalize()


# --------------------------------------------------------------------------
# forest and weights

@dataclass
class CausalForest:
    """Fitted forest; leaves are described by the estimation rows they hold."""

    trees: list[Tree]
    params: McfParams
    n_arms: int
    feature_names: list[str]
    feature_kinds: tuple[str, ...]
    est_d: np.ndarray
    est_y: np.ndarray
    est_leaf: np.ndarray            # (n_trees, n_est) leaf id per estimation row
    outcome_names: list[str] = field(default_factory=list)
    train_rows: list[np.ndarray] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_est(self) -> int:
        return int(self.est_d.shape[0])

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def leaf_counts(self, t: int) -> np.ndarray:
        """(n_nodes, n_arms) estimation-row counts per node of tree ``t``."""
        n_nodes = self.trees[t].n_nodes
        key = self.est_leaf[t] * self.n_arms + self.est_d
        return np.bincount(key, minlength=n_nodes * self.n_arms).reshape(
            n_nodes, self.n_arms)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        return np.ascontiguousarray(x)

    def weights(self, x, arms=None) -> "ForestWeights":
        """Weight matrix over estimation rows for every row of ``x``.

        A tree contributes to a prediction only if the leaf holds at least
        one estimation row of every requested arm (all arms by default).
        """
        x = self._check(x)
        arms = tuple(range(self.n_arms)) if arms is None else tuple(sorted(set(arms)))
        digest = hashlib.sha1(x.tobytes()).hexdigest() + str(x.shape) + str(arms)
        if digest in self._cache:
            return self._cache[digest]
        arm_mask = np.zeros(self.n_arms, dtype=np.bool_)
        arm_mask[list(arms)] = True
        leaves = np.stack([apply_tree(t, x) for t in self.trees]) if self.trees \
            else np.zeros((0, x.shape[0]), dtype=np.int64)
        offsets, members, counts = self._membership()
        w, n_complete = _accumulate_weights(leaves, offsets, members, counts,
                                            self.est_d, self.n_arms, arm_mask,
                                            self.n_est)
        fw = ForestWeights(w, n_complete > 0, self.est_d, arms, n_complete)
        if len(self._cache) > 8:
            self._cache.clear()
        self._cache[digest] = fw
        return fw

    def _membership(self):
        if "membership" not in self._cache:
            offs, mems, cnts = [], [], []
            base = 0
            for t in range(len(self.trees)):
                n_nodes = self.trees[t].n_nodes
                key = self.est_leaf[t] * self.n_arms + self.est_d
                order = np.argsort(key, kind="stable")
                cnt = np.bincount(key, minlength=n_nodes * self.n_arms)
                start = np.concatenate(([0], np.cumsum(cnt)))
                offs.append(start[:-1] + base)
                cnts.append(cnt)
                mems.append(order)
                base += self.n_est
            pad = max((o.size for o in offs), default=0)
            offsets = np.zeros((len(offs), pad), dtype=np.int64)
            counts = np.zeros((len(offs), pad), dtype=np.int64)
            for t, (o, c) in enumerate(zip(offs, cnts)):
                offsets[t, :o.size] = o
                counts[t, :c.size] = c
            members = np.concatenate(mems).astype(np.int64) if mems \
                else np.zeros(0, dtype=np.int64)
            self._cache["membership"] = (offsets, members, counts)
        return self._cache["membership"]

    def loo_predictions(self, outcome: int = 0) -> np.ndarray:
        """Leave-one-out forest prediction of each estimation row's own arm mean."""
        key = ("loo", outcome)
        if key in self._cache:
            return self._cache[key]
        y = self.est_y[:, outcome]
        total = np.zeros(self.n_est)
        used = np.zeros(self.n_est)
        for t in range(len(self.trees)):
            n_nodes = self.trees[t].n_nodes
            cell = self.est_leaf[t] * self.n_arms + self.est_d
            sums = np.bincount(cell, weights=y, minlength=n_nodes * self.n_arms)
            cnt = np.bincount(cell, minlength=n_nodes * self.n_arms)
            complete = (cnt.reshape(n_nodes, self.n_arms) > 0).all(axis=1)
            ok = (cnt[cell] > 1) & complete[self.est_leaf[t]]
            total[ok] += (sums[cell[ok]] - y[ok]) / (cnt[cell[ok]] - 1)
            used[ok] += 1
        pred = np.empty(self.n_est)
        have = used > 0
        pred[have] = total[have] / used[have]
        for a in range(self.n_arms):
            miss = ~have & (self.est_d == a)
            if miss.any():
                pred[miss] = y[self.est_d == a].mean()
        self._cache[key] = pred
        return pred

    def residuals(self, outcome: int = 0) -> np.ndarray:
        return self.est_y[:, outcome] - self.loo_predictions(outcome)

    def to_dict(self) -> dict:
        return {"version": FOREST_VERSION, "params": asdict(self.params),
                "n_arms": self.n_arms, "feature_names": self.feature_names,
                "feature_kinds": list(self.feature_kinds),
                "outcome_names": self.outcome_names,
                "est_d": self.est_d.tolist(), "est_y": self.est_y.tolist(),
                "est_leaf": self.est_leaf.tolist(),
                "trees": [t.to_dict() for t in self.trees],
                "train_rows": [r.tolist() for r in self.train_rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "CausalForest":
        if d.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported causal forest version {d.get('version')}")
        return cls(trees=[Tree.from_dict(t) for t in d["trees"]],
                   params=McfParams(**d["params"]), n_arms=d["n_arms"],
                   feature_names=list(d["feature_names"]),
                   feature_kinds=tuple(d["feature_kinds"]),
                   est_d=np.asarray(d["est_d"], dtype=np.int64),
                   est_y=np.asarray(d["est_y"], dtype=float).reshape(len(d["est_d"]), -1),
                   est_leaf=np.asarray(d["est_leaf"], dtype=np.int64).reshape(
                       len(d["trees"]), len(d["est_d"])),
                   outcome_names=list(d.get("outcome_names", [])),
                   train_rows=[np.asarray(r, dtype=np.int64) for r in d.get("train_rows", [])])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "CausalForest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@numba.njit(cache=True, nogil=True)
def _accumulate_weights(leaves, offsets, members, counts, est_d, n_arms,
                        arm_mask, n_est):
    n_trees, n_pred = leaves.shape
    w = np.zeros((n_pred, n_est))
    n_complete = np.zeros(n_pred, dtype=np.int64)
    for i in range(n_pred):
        for t in range(n_trees):
            base = leaves[t, i] * n_arms
            complete = True
            for a in range(n_arms):
                if arm_mask[a] and counts[t, base + a] == 0:
                    complete = False
                    break
            if not complete:
                continue
            n_complete[i] += 1
            for a in range(n_arms):
                if not arm_mask[a]:
                    continue
                c = counts[t, base + a]
                start = offsets[t, base + a]
                inc = 1.0 / c
                for k in range(c):
                    w[i, members[start + k]] += inc
        if n_complete[i] > 0:
            for j in range(n_est):
                w[i, j] /= n_complete[i]
    return w, n_complete


@dataclass
class ForestWeights:
    """Dense prediction weights: row i, column j is the weight of estimation row j."""

    w: np.ndarray
    defined: np.ndarray
    est_d: np.ndarray
    arms: tuple
    n_trees_used: np.ndarray

    def arm(self, a: int) -> np.ndarray:
        return self.w[:, self.est_d == a]

    def mu(self, y_est: np.ndarray) -> np.ndarray:
        """Potential outcome means (n_pred, n_arms); NaN where undefined."""
        n_arms = int(self.est_d.max()) + 1 if self.est_d.size else 0
        n_arms = max(n_arms, max(self.arms) + 1)
        out = np.full((self.w.shape[0], n_arms), np.nan)
        for a in self.arms:
            cols = self.est_d == a
            out[:, a] = self.w[:, cols] @ y_est[cols]
        out[~self.defined] = np.nan
        return out


def fit_mcf(train: Dataset, estimation: Dataset, params: McfParams = McfParams(),
            n_jobs: int | None = None) -> CausalForest:
    """Grow an honest modified causal forest.

    Tree structure comes from subsamples of ``train``; every estimation row
    is then dropped down each tree to fill the leaves. Passing the same
    dataset twice gives a dishonest forest, useful for testing.
    """
    k = train.n_treatments
    if estimation.n_treatments != k:
        raise ValueError("train and estimation disagree on the number of arms")
    if train.covariate_names != estimation.covariate_names:
        raise ValueError("train and estimation have different covariates")
    for name, ds in (("training", train), ("estimation", estimation)):
        if ds.n == 0:
            raise ValueError(f"{name} sample is empty")
        missing = np.flatnonzero(ds.treatment_counts() == 0)
        if missing.size:
            raise ValueError(f"treatment(s) {missing.tolist()} absent from the "
                             f"{name} sample")
    p = train.x.shape[1]
    mtry = params.validate(p)
    kinds = tuple(train.covariate_kinds)
    y = train.outcome(params.outcome)
    size = max(1, int(math.ceil(params.subsample * train.n)))

    def one(t):
        rng = tree_rng(params.seed, t)
        rows = np.sort(rng.choice(train.n, size=size, replace=False))
        tree = _grow(train.x, y, train.d, kinds, rows, k, mtry, params, rng)
        return tree, rows

    jobs = default_jobs() if n_jobs is None else n_jobs
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(params.n_trees)))
    else:
        results = [one(t) for t in range(params.n_trees)]
    trees = [r[0] for r in results]
    est_x = np.ascontiguousarray(estimation.x)
    est_leaf = np.stack([apply_tree(t, est_x) for t in trees])
    return CausalForest(trees=trees, params=params, n_arms=k,
                        feature_names=train.covariate_names, feature_kinds=kinds,
                        est_d=estimation.d.copy(), est_y=estimation.y.copy(),
                        est_leaf=est_leaf, outcome_names=train.outcome_names,
                        train_rows=[r[1] for r in results])


def local_centering(data: Dataset, folds: int = 2,
                    params: ForestParams = ForestParams(n_trees=100, min_leaf=5),
                    seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Subtract a cross-fitted regression-forest prediction of each outcome.

    Every row's prediction comes from a forest that did not see it, so the
    centred outcome ``y - E[y | x]`` keeps no own-row information. Effects
    are unchanged in expectation while confounding through the outcome
    level shrinks. Returns the centred data and the (n, n_outcomes)
    predictions.
    """
    if folds < 2:
        raise ValueError("local centering needs at least 2 folds")
    if data.n < folds:
        raise ValueError("fewer rows than folds")
    rng = np.random.default_rng([seed, 0x4C43])
    fold = rng.permutation(data.n) % folds
    yhat = np.empty_like(data.y, dtype=float)
    kinds = data.covariate_kinds
    for m in range(data.y.shape[1]):
        for f in range(folds):
            fp = ForestParams(**{**params.__dict__, "seed": seed * 1000 + f * 31 + m})
            model = fit_regression(data.x[fold != f], data.y[fold != f, m], fp,
                                   feature_kinds=kinds)
            yhat[fold == f, m] = model.predict(data.x[fold == f])
    return data.with_outcomes(data.y - yhat), yhat


@dataclass
class WeightVector:
    """Sparse per-arm weights of one prediction point."""

    rows: dict[int, np.ndarray]      # estimation row ids per arm
    values: dict[int, np.ndarray]

    def total(self, arm: int) -> float:
        return float(self.values[arm].sum())


def weights_for(forest: CausalForest, x, arms=None) -> WeightVector:
    fw = forest.weights(np.asarray(x, dtype=float).reshape(1, -1), arms)
    if not fw.defined[0]:
        raise UndefinedPredictionError("no tree has a complete leaf for arms "
                                       f"{list(fw.arms)} at this point")
    rows, values = {}, {}
    for a in fw.arms:
        ids = np.flatnonzero(forest.est_d == a)
        wa = fw.w[0, ids]
        nz = wa > 0
        rows[a], values[a] = ids[nz], wa[nz]
    return WeightVector(rows, values)


def potential_outcomes(forest: CausalForest, x, outcome: int = 0, arms=None) -> np.ndarray:
    """Estimated mean potential outcome for each arm at each row of ``x``.

    A single row returns a vector and raises ``UndefinedPredictionError``
    when undefined; a matrix returns NaN rows instead.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    fw = forest.weights(x.reshape(1, -1) if single else x, arms)
    mu = fw.mu(forest.est_y[:, outcome])
    if single:
        if not fw.defined[0]:
            raise UndefinedPredictionError("prediction undefined at this point")
        return mu[0]
    return mu


def iate(forest: CausalForest, x, contrast: tuple[int, int], outcome: int = 0) -> np.ndarray:
    """mu_d(x) - mu_d'(x) for ``contrast = (d, d')``."""
    mu = potential_outcomes(forest, x, outcome)
    d1, d0 = contrast
    if mu.ndim == 1:
        return mu[d1] - mu[d0]
    return mu[:, d1] - mu[:, d0]


def weight_triplets(forest: CausalForest, x, arms=None) -> list[dict]:
    """Nonzero weights as (point, arm, row, weight) records for audit."""
    fw = forest.weights(x, arms)
    out = []
    for i in range(fw.w.shape[0]):
        if not fw.defined[i]:
            continue
        nz = np.flatnonzero(fw.w[i] > 0)
        for j in nz:
            out.append({"point": i, "arm": int(forest.est_d[j]), "row": int(j),
                        "weight": float(fw.w[i, j])})
    return out


def write_weight_triplets(path, forest: CausalForest, x, arms=None) -> int:
    """Write the sparse weight matrix as CSV; returns the number of entries."""
    rows = weight_triplets(forest, x, arms)
    write_table(path, rows, ["point", "arm", "row", "weight"])
    return len(rows)
