"""Optimal policy trees, allocation baselines and policy evaluation.

Trees are found by exhaustive recursive search. Under capacity
constraints every subtree returns a Pareto frontier of
(rows assigned to each capped arm, value) pairs, so combining subtrees
stays exact: the best feasible root entry is the constrained optimum.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .data import write_table


class InfeasibleConstraintsError(ValueError):
    """No allocation meets the capacity constraints."""


# --------------------------------------------------------------------------
# data splitting and constraints

def three_way_split(d, fractions=(0.4, 0.4, 0.2), seed: int = 0):
    """Disjoint, exhaustive partition stratified by treatment.

    Rows of every arm are shuffled and concatenated; walking that list,
    each row goes to the split whose realized size lags its target the
    most, which keeps totals exact (n=100 gives 40/40/20) and arm shares
    within one row of the global shares.
    """
    d = np.asarray(d).astype(np.int64)
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng([seed, 0x3353])
    order = np.concatenate([rng.permutation(np.flatnonzero(d == a))
                            for a in np.unique(d)]) if d.size else np.zeros(0, np.int64)
    assigned = np.zeros(3)
    part = np.empty(d.size, dtype=np.int64)
    for pos, row in enumerate(order):
        deficit = fr * (pos + 1) - assigned
        s = int(np.argmax(deficit))
        part[row] = s
        assigned[s] += 1
    return tuple(np.flatnonzero(part == s) for s in range(3))


@dataclass(frozen=True)
class Constraints:
    """Maximum treated share per arm; ``None`` entries are unconstrained."""

    max_shares: tuple

    def __post_init__(self):
        shares = tuple(self.max_shares)
        object.__setattr__(self, "max_shares", shares)
        for s in shares:
            if s is not None and not 0.0 <= s <= 1.0:
                raise ValueError("max shares must lie in [0, 1]")
        if all(s is not None for s in shares) and sum(shares) < 1.0 - 1e-12:
            raise InfeasibleConstraintsError("capacity shares sum to less than one "
                                             "and no arm is unconstrained")

    @classmethod
    def of(cls, n_arms: int, caps: dict) -> "Constraints":
        return cls(tuple(caps.get(a) for a in range(n_arms)))

    def capped(self) -> list[int]:
        return [a for a, s in enumerate(self.max_shares) if s is not None and s < 1.0]

    def max_counts(self, n: int) -> np.ndarray:
        return np.array([math.floor(self.max_shares[a] * n + 1e-9) for a in self.capped()],
                        dtype=np.int64)

    def satisfied(self, assignment) -> bool:
        a = np.asarray(assignment)
        caps = self.max_counts(a.size)
        return all(np.sum(a == arm) <= c for arm, c in zip(self.capped(), caps))


# --------------------------------------------------------------------------
# trees

@dataclass(frozen=True)
class PolicyNode:
    arm: int | None = None
    feature: int | None = None
    how: str = "le"
    threshold: float = 0.0
    cats: tuple = ()
    left: "PolicyNode | None" = None
    right: "PolicyNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.arm is not None

    def goes_left(self, v: np.ndarray) -> np.ndarray:
        col = v[:, self.feature]
        if self.how == "set":
            return np.isin(col, self.cats)
        return col <= self.threshold

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self, names=None) -> dict:
        if self.is_leaf:
            return {"treatment": int(self.arm)}
        name = names[self.feature] if names else self.feature
        out = {"variable": name}
        if self.how == "set":
            out["categories"] = [float(c) for c in self.cats]
        else:
            out["threshold"] = float(self.threshold)
        out["left"] = self.left.to_dict(names)
        out["right"] = self.right.to_dict(names)
        return out

    @classmethod
    def from_dict(cls, d: dict, names=None) -> "PolicyNode":
        if "treatment" in d:
            return cls(arm=int(d["treatment"]))
        feat = names.index(d["variable"]) if names else int(d["variable"])
        left, right = cls.from_dict(d["left"], names), cls.from_dict(d["right"], names)
        if "categories" in d:
            return cls(feature=feat, how="set", cats=tuple(d["categories"]),
                       left=left, right=right)
        return cls(feature=feat, threshold=float(d["threshold"]), left=left, right=right)


def _assign(node: PolicyNode, v: np.ndarray, rows: np.ndarray, out: np.ndarray):
    if node.is_leaf:
        out[rows] = node.arm
        return
    left = node.goes_left(v[rows])
    _assign(node.left, v, rows[left], out)
    _assign(node.right, v, rows[~left], out)


@dataclass
class PolicyTree:
    root: PolicyNode
    n_arms: int
    feature_names: list[str]
    value: float                  # in-sample total of cost-adjusted scores
    shares: np.ndarray
    costs: np.ndarray
    notes: list[str] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.root.depth()

    def predict(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        out = np.empty(v.shape[0], dtype=np.int64)
        _assign(self.root, v, np.arange(v.shape[0]), out)
        return out

    def mean_value(self, n: int) -> float:
        return self.value / n

    def to_text(self) -> str:
        lines: list[str] = []

        def walk(node, indent):
            pad = "    " * indent
            if node.is_leaf:
                lines.append(f"{pad}treatment {node.arm}")
                return
            name = self.feature_names[node.feature] if self.feature_names else str(node.feature)
            if node.how == "set":
                cats = ", ".join(repr(float(c)) for c in node.cats)
                cond, neg = f"{name} in {{{cats}}}", f"{name} not in {{{cats}}}"
            else:
                cond, neg = f"{name} <= {node.threshold!r}", f"{name} > {node.threshold!r}"
            lines.append(f"{pad}if {cond}:")
            walk(node.left, indent + 1)
            lines.append(f"{pad}else:  # {neg}")
            walk(node.right, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"n_arms": self.n_arms, "features": list(self.feature_names),
                "value": float(self.value), "shares": [float(s) for s in self.shares],
                "costs": [float(c) for c in self.costs],
                "tree": self.root.to_dict(self.feature_names or None)}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


# --------------------------------------------------------------------------
# frontier search

@dataclass
class _Frontier:
    counts: np.ndarray   # (m, c) rows given to each capped arm
    values: np.ndarray   # (m,)
    nodes: list          # PolicyNode per entry


def _prune(counts, values):
    """Indices of non-dominated entries, best value first (stable)."""
    order = np.argsort(-values, kind="stable")
    if counts.shape[1] == 0:
        return order[:1]
    kept = []
    if counts.shape[1] == 1:
        best = np.iinfo(np.int64).max
        for i in order:
            c = counts[i, 0]
            if c < best:
                kept.append(i)
                best = c
        return np.array(kept, dtype=np.int64)
    kept_counts = np.zeros((0, counts.shape[1]), dtype=np.int64)
    for i in order:
        if kept_counts.shape[0] and np.any(np.all(kept_counts <= counts[i], axis=1)):
            continue
        kept.append(i)
        kept_counts = np.vstack([kept_counts, counts[i]])
    return np.array(kept, dtype=np.int64)


class _Search:
    def __init__(self, theta, v, kinds, capped, caps, approx, max_split_points,
                 max_subset_levels):
        self.theta = theta
        self.v = v
        self.kinds = kinds
        self.capped = list(capped)
        self.caps = caps
        self.approx = approx
        self.max_split_points = max_split_points
        self.max_subset_levels = max_subset_levels
        self.memo: dict = {}
        self.cap_pos = {a: i for i, a in enumerate(self.capped)}

    def leaf_frontier(self, rows) -> _Frontier:
        sums = self.theta[rows].sum(axis=0)
        k = sums.shape[0]
        counts = np.zeros((k, len(self.capped)), dtype=np.int64)
        for a, i in self.cap_pos.items():
            counts[a, i] = rows.size
        ok = np.all(counts <= self.caps, axis=1)
        idx = np.flatnonzero(ok)
        keep = idx[_prune(counts[idx], sums[idx])]
        return _Frontier(counts[keep], sums[keep], [PolicyNode(arm=int(a)) for a in keep])

    def candidates(self, rows, level):
        """(feature, how, arg, left_mask) for every admissible split of ``rows``."""
        out = []
        stride = 2 ** level if self.approx else 1
        for j in range(self.v.shape[1]):
            col = self.v[rows, j]
            levels = np.unique(col)
            if levels.size < 2:
                continue
            if self.kinds[j] == "unordered" and levels.size <= self.max_subset_levels:
                subsets = []
                rest = levels[1:]
                # subsets holding the first level, excluding the full set
                for r in range(0, rest.size):
                    for comb in combinations(rest.tolist(), r):
                        subsets.append((levels[0],) + comb)
                for cats in subsets[::stride]:
                    out.append((j, "set", tuple(float(c) for c in cats),
                                np.isin(col, cats)))
                continue
            if self.kinds[j] == "unordered":
                # order categories by the gap between the two best arms
                means = np.array([self.theta[rows[col == c]].mean(axis=0) for c in levels])
                top = np.sort(means, axis=1)
                gap = top[:, -1] - (top[:, -2] if top.shape[1] > 1 else 0.0)
                best = np.argmax(means, axis=1)
                ordered = levels[np.lexsort((levels, gap, best))]
                cuts = [tuple(float(c) for c in ordered[:i + 1])
                        for i in range(levels.size - 1)]
                for cats in cuts[::stride]:
                    out.append((j, "set", cats, np.isin(col, cats)))
                continue
            thresholds = 0.5 * (levels[:-1] + levels[1:])
            thresholds = thresholds[::stride]
            if self.max_split_points and thresholds.size > self.max_split_points:
                pick = np.unique(np.linspace(0, thresholds.size - 1,
                                             self.max_split_points).round().astype(int))
                thresholds = thresholds[pick]
            for t in thresholds:
                out.append((j, "le", float(t), col <= t))
        return out

    def solve(self, rows, depth, level) -> _Frontier:
        key = (rows.tobytes(), depth, level)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        parts = [self.leaf_frontier(rows)]
        if depth > 0:
            for j, how, arg, mask in self.candidates(rows, level):
                fl = self.solve(rows[mask], depth - 1, level + 1)
                fr = self.solve(rows[~mask], depth - 1, level + 1)
                merged = self.merge(fl, fr, j, how, arg)
                if merged is not None:
                    parts.append(merged)
        front = self.union(parts)
        self.memo[key] = front
        return front

    def merge(self, fl: _Frontier, fr: _Frontier, j, how, arg):
        if not fl.values.size or not fr.values.size:
            return None
        counts = fl.counts[:, None, :] + fr.counts[None, :, :]
        values = fl.values[:, None] + fr.values[None, :]
        counts = counts.reshape(values.size, len(self.capped))
        values = values.ravel()
        ok = np.flatnonzero(np.all(counts <= self.caps, axis=1))
        if not ok.size:
            return None
        keep = ok[_prune(counts[ok], values[ok])]
        m_r = fr.values.size
        nodes = []
        for i in keep:
            li, ri = divmod(int(i), m_r)
            if how == "set":
                node = PolicyNode(feature=j, how="set", cats=arg,
                                  left=fl.nodes[li], right=fr.nodes[ri])
            else:
                node = PolicyNode(feature=j, threshold=arg,
                                  left=fl.nodes[li], right=fr.nodes[ri])
            nodes.append(node)
        return _Frontier(counts[keep], values[keep], nodes)

    def union(self, parts) -> _Frontier:
        parts = [p for p in parts if p.values.size]
        if not parts:
            return _Frontier(np.zeros((0, len(self.capped)), dtype=np.int64),
                             np.zeros(0), [])
        counts = np.vstack([p.counts for p in parts])
        values = np.concatenate([p.values for p in parts])
        nodes = [n for p in parts for n in p.nodes]
        keep = _prune(counts, values)
        return _Frontier(counts[keep], values[keep], [nodes[i] for i in keep])


def _check_inputs(scores, features, kinds):
    theta = np.asarray(scores, dtype=float)
    if theta.ndim != 2 or theta.shape[0] == 0 or theta.shape[1] == 0:
        raise ValueError("score matrix is empty")
    if not np.all(np.isfinite(theta)):
        raise ValueError("scores must be finite")
    v = np.asarray(features, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] != theta.shape[0]:
        raise ValueError("features and scores differ in rows")
    kinds = tuple(kinds) if kinds is not None else ("continuous",) * v.shape[1]
    if len(kinds) != v.shape[1]:
        raise ValueError("one kind per policy feature is needed")
    return theta, v, kinds


def _tree_from_root(root: PolicyNode, v, theta, costs, names, notes=()) -> PolicyTree:
    n, k = theta.shape
    alloc = np.empty(n, dtype=np.int64)
    _assign(root, v, np.arange(n), alloc)
    value = float(theta[np.arange(n), alloc].sum())
    shares = np.bincount(alloc, minlength=k) / n
    return PolicyTree(root, k, list(names), value, shares, np.asarray(costs, dtype=float),
                      list(notes))


def fit_policy_tree(scores, features, depth: int = 2, constraints: Constraints | None = None,
                    kinds=None, feature_names: Sequence[str] | None = None,
                    costs=None, approx: bool = True, max_split_points: int | None = None,
                    max_subset_levels: int = 8, method: str = "exact") -> PolicyTree:
    """Depth-bounded policy tree maximizing the summed (cost-adjusted) scores.

    Parameters
    ----------
    scores : (n, K) array
        Policy score of each arm for each row, e.g. estimated potential outcomes.
    features : (n, q) array
        Policy variables.
    depth : int
        Maximum depth, 0 to 4.
    constraints : Constraints, optional
        Maximum in-sample share per arm.
    approx : bool
        Thin split candidates below the root: level l keeps every 2**l-th one.
    max_split_points : int, optional
        Cap on threshold candidates per ordered feature and node.
    method : {"exact", "cost"}
        ``"exact"`` searches Pareto frontiers over capped-arm counts and is
        exactly optimal; ``"cost"`` bisects a per-arm cost until the caps hold.
    """
    theta_raw, v, kinds = _check_inputs(scores, features, kinds)
    n, k = theta_raw.shape
    if not 0 <= depth <= 4:
        raise ValueError("depth must lie in 0..4")
    costs = np.zeros(k) if costs is None else np.asarray(costs, dtype=float)
    names = list(feature_names) if feature_names is not None else \
        [f"v{j}" for j in range(v.shape[1])]
    theta = theta_raw - costs
    if constraints is not None and len(constraints.max_shares) != k:
        raise ValueError("constraints must list one share per arm")
    if constraints is None or not constraints.capped():
        return _search(theta, v, kinds, [], np.zeros(0, np.int64), depth, approx,
                       max_split_points, max_subset_levels, costs, names)
    if method == "cost":
        return _cost_search(theta, v, kinds, constraints, depth, approx,
                            max_split_points, max_subset_levels, costs, names)
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    return _search(theta, v, kinds, constraints.capped(), constraints.max_counts(n),
                   depth, approx, max_split_points, max_subset_levels, costs, names)


def _search(theta, v, kinds, capped, caps, depth, approx, max_split_points,
            max_subset_levels, costs, names, rows=None) -> PolicyTree:
    search = _Search(theta, v, kinds, capped, caps, approx, max_split_points,
                     max_subset_levels)
    rows = np.arange(theta.shape[0]) if rows is None else rows
    front = search.solve(rows, depth, 0)
    if not front.values.size:
        raise InfeasibleConstraintsError("no tree meets the capacity constraints")
    return _tree_from_root(front.nodes[0], v, theta, costs, names)


def _cost_search(theta, v, kinds, constraints, depth, approx, max_split_points,
                 max_subset_levels, costs, names, rounds: int = 20,
                 iters: int = 40) -> PolicyTree:
    n, k = theta.shape
    capped = constraints.capped()
    caps = constraints.max_counts(n)
    extra = np.zeros(k)
    scale = float(np.ptp(theta)) + 1.0

    def fit(extra_costs):
        return _search(theta - extra_costs, v, kinds, [], np.zeros(0, np.int64), depth,
                       approx, max_split_points, max_subset_levels, costs + extra_costs,
                       names)

    def counts(tree):
        return tree.shares * n

    tree = fit(extra)
    for _ in range(rounds):
        over = [(a, c) for a, c in zip(capped, caps) if counts(tree)[a] > c + 1e-9]
        if not over:
            break
        for a, c in over:
            lo, hi = extra[a], extra[a] + scale
            trial = extra.copy()
            trial[a] = hi
            while counts(fit(trial))[a] > c + 1e-9:
                hi += scale
                trial[a] = hi
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                trial[a] = mid
                if counts(fit(trial))[a] > c + 1e-9:
                    lo = mid
                else:
                    hi = mid
            extra[a] = hi
        tree = fit(extra)
    if not constraints.satisfied(tree.predict(v)):
        raise InfeasibleConstraintsError("cost search did not meet the caps")
    # report the value on the caller's (cost-adjusted) scores
    return _tree_from_root(tree.root, v, theta, costs + extra, names,
                           [f"costs found by bisection: {extra.tolist()}"])


def fit_sequential_tree(scores, features, depth_a: int, depth_b: int,
                        constraints: Constraints | None = None, kinds=None,
                        feature_names=None, costs=None, approx: bool = True,
                        max_split_points: int | None = None,
                        max_subset_levels: int = 8) -> PolicyTree:
    """A depth_a tree, then a depth_b tree inside each of its leaves.

    Caps bind on the whole sample: the frontiers of the leaf subtrees are
    combined before the best feasible combination is chosen.
    """
    theta_raw, v, kinds = _check_inputs(scores, features, kinds)
    n, k = theta_raw.shape
    costs = np.zeros(k) if costs is None else np.asarray(costs, dtype=float)
    theta = theta_raw - costs
    base = fit_policy_tree(theta_raw, v, depth_a, constraints, kinds, feature_names,
                           costs, approx, max_split_points, max_subset_levels)
    if depth_b == 0:
        return base
    capped = constraints.capped() if constraints is not None else []
    caps = constraints.max_counts(n) if constraints is not None else np.zeros(0, np.int64)
    search = _Search(theta, v, kinds, capped, caps, approx, max_split_points,
                     max_subset_levels)

    def rebuild(node, rows):
        # returns the frontier of the composite subtree below ``node``
        if node.is_leaf:
            return search.solve(rows, depth_b, 0)
        left = node.goes_left(v[rows])
        fl = rebuild(node.left, rows[left])
        fr = rebuild(node.right, rows[~left])
        merged = search.merge(fl, fr, node.feature, node.how,
                              node.cats if node.how == "set" else node.threshold)
        if merged is None:
            return _Frontier(np.zeros((0, len(capped)), dtype=np.int64), np.zeros(0), [])
        return merged

    front = rebuild(base.root, np.arange(n))
    if not front.values.size:
        raise InfeasibleConstraintsError("no composite tree meets the capacity constraints")
    names = base.feature_names
    return _tree_from_root(front.nodes[0], v, theta, costs, names,
                           [f"sequential tree: depth {depth_a} + {depth_b}"])


# --------------------------------------------------------------------------
# baselines and evaluation

def best_score_allocation(scores, constraints: Constraints | None = None) -> np.ndarray:
    """Arm with the highest score per row (ties to the lowest label).

    With caps, rows are visited in descending order of the gap between
    their best and second-best score and take their best arm that still
    has room. This greedy rule is a heuristic, not an optimum.
    """
    theta = np.asarray(scores, dtype=float)
    n, k = theta.shape
    if constraints is None or not constraints.capped():
        return np.argmax(theta, axis=1)
    room = np.full(k, np.iinfo(np.int64).max)
    room[constraints.capped()] = constraints.max_counts(n)
    ordered = np.sort(theta, axis=1)
    gap = ordered[:, -1] - (ordered[:, -2] if k > 1 else 0.0)
    out = np.empty(n, dtype=np.int64)
    for i in np.argsort(-gap, kind="stable"):
        pref = np.lexsort((np.arange(k), -theta[i]))
        arm = next((a for a in pref if room[a] > 0), None)
        if arm is None:
            raise InfeasibleConstraintsError("capacity exhausted")
        out[i] = arm
        room[arm] -= 1
    return out


def largest_remainder(shares, n: int) -> np.ndarray:
    shares = np.asarray(shares, dtype=float)
    if np.any(shares < 0) or abs(shares.sum() - 1) > 1e-9:
        raise ValueError("shares must be non-negative and sum to 1")
    quota = shares * n
    counts = np.floor(quota + 1e-12).astype(np.int64)
    rem = quota - counts
    short = n - counts.sum()
    order = np.lexsort((np.arange(shares.size), -rem))
    counts[order[:short]] += 1
    return counts


def random_allocation(shares, n: int, seed: int = 0) -> np.ndarray:
    """Exact largest-remainder counts per arm in a seeded random order."""
    counts = largest_remainder(shares, n)
    alloc = np.repeat(np.arange(counts.size), counts)
    return np.random.default_rng([seed, 0x5241]).permutation(alloc)


@dataclass(frozen=True)
class PolicyValue:
    name: str
    value: float
    shares: np.ndarray

    def row(self) -> dict:
        out = {"policy": self.name, "value": self.value}
        for a, s in enumerate(self.shares):
            out[f"share_{a}"] = float(s)
        return out


def evaluate_policy(assignment, outcomes, name: str = "policy") -> PolicyValue:
    """Mean assigned-arm score (or true potential outcome) and arm shares."""
    y = np.asarray(outcomes, dtype=float)
    a = np.asarray(assignment).astype(np.int64)
    if y.shape[0] != a.shape[0]:
        raise ValueError("assignment and outcomes differ in length")
    n, k = y.shape
    value = float(y[np.arange(n), a].mean()) if n else 0.0
    return PolicyValue(name, value, np.bincount(a, minlength=k) / max(n, 1))


def write_allocation_table(path, values: Sequence[PolicyValue]) -> None:
    k = max(v.shares.size for v in values)
    write_table(path, [v.row() for v in values],
                ["policy", "value"] + [f"share_{a}" for a in range(k)])
