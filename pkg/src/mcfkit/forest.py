"""Random forest for regression and classification.

Used for propensity scores and pseudo programme start dates. Trees are
grown on subsamples drawn without replacement; the in-bag rows of every
tree are kept on the model so callers can form out-of-bag predictions.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .trees import Tree, apply_tree, default_jobs, tree_rng

MODEL_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 1000
    mtry: int | None = None
    min_leaf: int = 12
    bootstrap_fraction: float = 0.5
    seed: int = 0
    max_depth: int | None = None

    def validate(self, p: int) -> int:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        mtry = default_mtry(p) if self.mtry is None else self.mtry
        if not 1 <= mtry <= p:
            raise ValueError(f"mtry must lie in [1, {p}], got {mtry}")
        return mtry


def default_mtry(p: int) -> int:
    """Three times the rounded-up square root of p, capped at p."""
    return max(1, min(p, 3 * math.ceil(math.sqrt(p))))


@dataclass
class ForestModel:
    kind: str                      # "regression" or "classification"
    trees: list[Tree]
    n_features: int
    feature_kinds: tuple[str, ...]
    params: ForestParams
    n_classes: int = 0
    inbag: list[np.ndarray] = field(default_factory=list)
    n_train: int = 0

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, "
                             f"got {x.shape[1]}")
        return x

    def _tree_values(self, x):
        for tree in self.trees:
            yield tree.values[apply_tree(tree, x)]

    def predict(self, x, oob: bool = False) -> np.ndarray:
        """Forest-averaged leaf payloads (means or class frequencies).

        With ``oob=True`` rows are taken to be the training rows in order,
        and each row only averages over trees that did not see it.
        """
        x = self._check(x)
        n = x.shape[0]
        width = self.n_classes if self.kind == "classification" else 1
        total = np.zeros((n, width))
        count = np.zeros(n)
        if oob and n != self.n_train:
            raise ValueError("out-of-bag prediction needs the training rows")
        for t, vals in enumerate(self._tree_values(x)):
            vals = vals.reshape(n, width)
            if oob:
                use = np.ones(n, dtype=bool)
                use[self.inbag[t]] = False
                total[use] += vals[use]
                count[use] += 1
            else:
                total += vals
                count += 1
        if oob and np.any(count == 0):
            # rows in every tree's subsample fall back to the full forest
            missing = count == 0
            full = self.predict(x[missing])
            total[missing] = full.reshape(-1, width)
            count[missing] = 1
        out = total / count[:, None]
        return out[:, 0] if self.kind == "regression" else out

    def to_dict(self) -> dict:
        return {"version": MODEL_VERSION, "kind": self.kind,
                "n_features": self.n_features,
                "feature_kinds": list(self.feature_kinds),
                "n_classes": self.n_classes, "n_train": self.n_train,
                "params": asdict(self.params),
                "trees": [t.to_dict() for t in self.trees],
                "inbag": [b.tolist() for b in self.inbag]}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported forest model version {d.get('version')}")
        return cls(kind=d["kind"], trees=[Tree.from_dict(t) for t in d["trees"]],
                   n_features=d["n_features"],
                   feature_kinds=tuple(d["feature_kinds"]),
                   params=ForestParams(**d["params"]),
                   n_classes=d["n_classes"],
                   inbag=[np.asarray(b, dtype=np.int64) for b in d["inbag"]],
                   n_train=d["n_train"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ForestModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _impurity_scan(target: np.ndarray, order: np.ndarray, kind: str):
    """Child impurity (n * impurity) for every prefix/suffix split point."""
    t = target[order]
    n = t.shape[0]
    if kind == "regression":
        c1 = np.cumsum(t)
        c2 = np.cumsum(t * t)
        nl = np.arange(1, n)
        nr = n - nl
        sl, sl2 = c1[:-1], c2[:-1]
        sr, sr2 = c1[-1] - sl, c2[-1] - sl2
        return (sl2 - sl * sl / nl) + (sr2 - sr * sr / nr)
    counts = np.cumsum(t, axis=0)        # t is one-hot here
    left = counts[:-1]
    right = counts[-1] - left
    nl = left.sum(axis=1)
    nr = right.sum(axis=1)
    gini_l = nl - (left * left).sum(axis=1) / nl
    gini_r = nr - (right * right).sum(axis=1) / nr
    return gini_l + gini_r


def _category_ranks(codes: np.ndarray, target: np.ndarray, kind: str):
    """Map categories to positions sorted by node outcome mean."""
    cats = np.unique(codes)
    if kind == "regression":
        score = np.array([target[codes == c].mean() for c in cats])
    else:
        # multi-class: order by share of the node's majority class
        major = int(np.argmax(target.sum(axis=0)))
        score = np.array([target[codes == c, major].mean() for c in cats])
    ordered = cats[np.lexsort((cats, score))]
    rank = {c: i for i, c in enumerate(ordered)}
    return np.array([rank[c] for c in codes], dtype=float), ordered


def _grow_tree(x, target, kinds, rows, mtry, min_leaf, max_depth, rng, kind):
    tree = Tree.empty()
    leaf_payload = (lambda r: target[r].mean()) if kind == "regression" \
        else (lambda r: target[r].mean(axis=0))
    stack = [(rows, tree.add_node(), 0)]
    p = x.shape[1]
    while stack:
        node_rows, node, depth = stack.pop()
        tree.set_value(node, leaf_payload(node_rows))
        m = node_rows.shape[0]
        if m < 2 * min_leaf or (max_depth is not None and depth >= max_depth):
            continue
        tnode = target[node_rows]
        if kind == "regression":
            pure = np.ptp(tnode) == 0
        else:
            pure = np.max(tnode.sum(axis=0)) == m
        if pure:
            continue
        feats = np.sort(rng.choice(p, size=mtry, replace=False))
        best = None
        for j in feats:
            col = x[node_rows, j]
            cat_order = None
            if kinds[j] == "unordered":
                col, cat_order = _category_ranks(col, tnode, kind)
            order = np.argsort(col, kind="stable")
            xs = col[order]
            valid = xs[:-1] < xs[1:]
            pos = np.arange(1, m)
            valid &= (pos >= min_leaf) & (m - pos >= min_leaf)
            if not valid.any():
                continue
            imp = _impurity_scan(tnode, order, kind)
            imp = np.where(valid, imp, np.inf)
            t = int(np.argmin(imp))
            if best is None or imp[t] < best[0]:
                if cat_order is not None:
                    split = ("set", cat_order[: int(xs[t]) + 1].tolist())
                else:
                    split = ("le", 0.5 * (xs[t] + xs[t + 1]))
                best = (imp[t], j, split, order[: t + 1], order[t + 1:])
        if best is None:
            continue
        _, j, split, left_pos, right_pos = best
        left, right = tree.split(node, j, split)
        stack.append((node_rows[right_pos], right, depth + 1))
        stack.append((node_rows[left_pos], left, depth + 1))
    return tree.finalize()


def _fit(x, target, params: ForestParams, kind, feature_kinds, n_classes, n_jobs):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("feature matrix must be two-dimensional")
    n, p = x.shape
    if n < 2 * params.min_leaf:
        raise ValueError(f"need at least 2 * min_leaf = {2 * params.min_leaf} "
                         f"rows, got {n}")
    mtry = params.validate(p)
    kinds = tuple(feature_kinds) if feature_kinds is not None else ("continuous",) * p
    if len(kinds) != p:
        raise ValueError("feature_kinds length must equal number of features")
    size = max(1, int(math.ceil(params.bootstrap_fraction * n)))

    def one(t):
        rng = tree_rng(params.seed, t)
        rows = np.sort(rng.choice(n, size=size, replace=False))
        tree = _grow_tree(x, target, kinds, rows, mtry, params.min_leaf,
                          params.max_depth, rng, kind)
        return tree, rows

    jobs = default_jobs() if n_jobs is None else n_jobs
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(params.n_trees)))
    else:
        results = [one(t) for t in range(params.n_trees)]
    return ForestModel(kind=kind, trees=[r[0] for r in results], n_features=p,
                       feature_kinds=kinds, params=params, n_classes=n_classes,
                       inbag=[r[1] for r in results], n_train=n)


def fit_regression(x, y, params: ForestParams = ForestParams(),
                   feature_kinds=None, n_jobs: int | None = None) -> ForestModel:
    """Variance-reduction regression forest; deterministic given ``params.seed``."""
    y = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("target contains non-finite values")
    return _fit(x, y, params, "regression", feature_kinds, 0, n_jobs)


def fit_classification(x, labels, params: ForestParams = ForestParams(),
                       n_classes: int | None = None, feature_kinds=None,
                       n_jobs: int | None = None) -> ForestModel:
    """Gini classification forest whose leaves hold class frequencies."""
    labels = np.asarray(labels).astype(np.int64).ravel()
    if labels.size and labels.min() < 0:
        raise ValueError("class labels must be non-negative")
    k = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if labels.size and labels.max() >= k:
        raise ValueError(f"label {labels.max()} outside 0..{k - 1}")
    onehot = np.zeros((labels.size, k))
    onehot[np.arange(labels.size), labels] = 1.0
    return _fit(x, onehot, params, "classification", feature_kinds, k, n_jobs)


def predict_proba(model: ForestModel, x, oob: bool = False) -> np.ndarray:
    """Class-probability vectors; a single row returns a 1-D vector."""
    if model.kind != "classification":
        raise ValueError("predict_proba needs a classification forest")
    single = np.asarray(x).ndim == 1
    probs = model.predict(x, oob=oob)
    probs = probs / probs.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def oob_r2(model: ForestModel, x, y) -> float:
    y = np.asarray(y, dtype=float)
    pred = model.predict(x, oob=True)
    return 1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
