"""Array-backed binary trees shared by the regression/classification and causal forests."""
from __future__ import annotations

import os

import numba
import numpy as np

THREADS_ENV = "MCFKIT_THREADS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def tree_rng(seed: int, index: int) -> np.random.Generator:
    # one independent stream per tree keeps results identical for any thread count
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


class Tree:
    """Binary tree stored as parallel arrays.

    A node splits on ``feature[i]``; ordered splits send ``x <= threshold``
    left, set splits send codes listed in ``cat_sets[i]`` left. Leaves
    have ``feature == -1``.
    """

    def __init__(self):
        self.feature: list | np.ndarray = []
        self.threshold: list | np.ndarray = []
        self.left: list | np.ndarray = []
        self.right: list | np.ndarray = []
        self.cat_sets: dict[int, list] = {}
        self.values: list | np.ndarray = []
        self.catmask = np.zeros((0, 0), dtype=np.bool_)

    @classmethod
    def empty(cls) -> "Tree":
        return cls()

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.values.append(None)
        return len(self.feature) - 1

    def set_value(self, node: int, value) -> None:
        self.values[node] = value

    def split(self, node: int, feature: int, split) -> tuple[int, int]:
        how, arg = split
        self.feature[node] = int(feature)
        if how == "le":
            self.threshold[node] = float(arg)
        else:
            self.cat_sets[node] = sorted(int(c) for c in arg)
        left, right = self.add_node(), self.add_node()
        self.left[node], self.right[node] = left, right
        return left, right

    def finalize(self) -> "Tree":
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        if self.values and self.values[0] is not None:
            self.values = np.asarray(self.values, dtype=np.float64)
        width = 1 + max((max(s) for s in self.cat_sets.values() if s), default=-1)
        mask = np.zeros((len(self.feature), width), dtype=np.bool_)
        for node, cats in self.cat_sets.items():
            mask[node, cats] = True
        self.catmask = mask
        self.is_set = np.zeros(len(self.feature), dtype=np.bool_)
        for node in self.cat_sets:
            self.is_set[node] = True
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def to_dict(self) -> dict:
        out = {"feature": self.feature.tolist(),
               "threshold": self.threshold.tolist(),
               "left": self.left.tolist(), "right": self.right.tolist(),
               "cat_sets": {str(k): v for k, v in sorted(self.cat_sets.items())}}
        if isinstance(self.values, np.ndarray):
            out["values"] = self.values.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        t = cls()
        t.feature = list(d["feature"])
        t.threshold = list(d["threshold"])
        t.left = list(d["left"])
        t.right = list(d["right"])
        t.cat_sets = {int(k): list(v) for k, v in d.get("cat_sets", {}).items()}
        t.values = list(d["values"]) if "values" in d else [None] * len(t.feature)
        return t.finalize()


@numba.njit(cache=True, nogil=True)
def _apply(feature, threshold, left, right, is_set, catmask, x):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    width = catmask.shape[1]
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            v = x[i, feature[node]]
            if is_set[node]:
                c = int(v)
                go_left = 0 <= c < width and catmask[node, c]
            else:
                go_left = v <= threshold[node]
            node = left[node] if go_left else right[node]
        out[i] = node
    return out


def apply_tree(tree: Tree, x: np.ndarray) -> np.ndarray:
    """Leaf node index reached by every row of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _apply(tree.feature, tree.threshold, tree.left, tree.right,
                  tree.is_set, tree.catmask, x)
