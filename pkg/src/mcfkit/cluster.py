"""k-means++ clustering of IATE vectors with silhouette-based choice of k."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, write_table


class DegenerateClusterWarning(UserWarning):
    """Clustering could not honour the requested k."""


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    silhouette: float
    shares: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)    # inertia per Lloyd step
    scores: dict = field(default_factory=dict)            # silhouette per tried k
    notes: list[str] = field(default_factory=list)

    def predict(self, points) -> np.ndarray:
        return _nearest(np.atleast_2d(np.asarray(points, dtype=float)), self.centroids)[0]


def _sq_dist(points, centroids):
    out = np.zeros((points.shape[0], centroids.shape[0]))
    for f in range(points.shape[1]):
        diff = points[:, f][:, None] - centroids[:, f][None, :]
        out += diff * diff
    return out


def _nearest(points, centroids):
    d = _sq_dist(points, centroids)
    lab = np.argmin(d, axis=1)          # ties to the lowest centroid index
    return lab, d[np.arange(points.shape[0]), lab]


def kmeanspp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """First centroid uniform, the rest drawn proportional to squared distance."""
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = _sq_dist(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dist(points, points[idx][None, :])[:, 0])
    return np.array(centers, dtype=float)


def lloyd(points: np.ndarray, centroids: np.ndarray, tol: float = 1e-6,
          max_iter: int = 300):
    """Lloyd iterations; returns centroids, labels, inertia history."""
    c = centroids.copy()
    history = []
    for _ in range(max_iter):
        labels, dist = _nearest(points, c)
        history.append(float(dist.sum()))
        new = c.copy()
        for j in range(c.shape[0]):
            members = labels == j
            if members.any():            # empty clusters keep their centroid
                new[j] = points[members].mean(axis=0)
        shift = np.max(np.sqrt(((new - c) ** 2).sum(axis=1)))
        c = new
        if shift < tol:
            break
    labels, dist = _nearest(points, c)
    history.append(float(dist.sum()))
    return c, labels, history


def silhouette_samples(points: np.ndarray, labels: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Per-point silhouette; points in singleton clusters score 0."""
    n = points.shape[0]
    uniq, lab = np.unique(labels, return_inverse=True)
    k = uniq.size
    if k < 2:
        return np.zeros(n)
    sizes = np.bincount(lab, minlength=k).astype(float)
    out = np.empty(n)
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        dist = np.sqrt(_sq_dist(block, points))
        sums = np.zeros((block.shape[0], k))
        for j in range(k):
            sums[:, j] = dist[:, lab == j].sum(axis=1)
        own = lab[start:start + chunk]
        rows = np.arange(block.shape[0])
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        other = sums / sizes[None, :]
        other[rows, own] = np.inf
        b = other.min(axis=1)
        s = np.where(np.maximum(a, b) > 0, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
        s[own_size == 1] = 0.0
        out[start:start + chunk] = s
    return out


def silhouette(points, labels) -> float:
    return float(np.mean(silhouette_samples(np.asarray(points, dtype=float), labels)))


def _fit_k(points, k, n_init, tol, max_iter, rng):
    best = None
    for _ in range(n_init):
        c0 = kmeanspp_seed(points, k, rng)
        c, labels, hist = lloyd(points, c0, tol, max_iter)
        if best is None or hist[-1] < best[2][-1]:
            best = (c, labels, hist)
    return best


def kmeanspp_fit(points, k_range: Sequence[int] = range(2, 9), min_share: float = 0.01,
                 n_init: int = 10, tol: float = 1e-6, max_iter: int = 300,
                 seed: int = 0) -> ClusterModel:
    """Best-of-``n_init`` k-means++ for each k; keep the k with the top mean silhouette.

    Only solutions whose smallest cluster holds at least ``min_share`` of
    the points are eligible. When none is, the smallest k wins with a
    warning.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1:
        raise ValueError("k_range must hold positive integers")
    if ks[-1] > n:
        raise ValueError(f"k={ks[-1]} exceeds the number of points {n}")
    rng = np.random.default_rng([seed, 0x4B4D])
    notes = []
    if n and np.all(pts == pts[0]) and ks[-1] >= 2:
        msg = "all points identical; using a single cluster"
        warnings.warn(msg, DegenerateClusterWarning, stacklevel=2)
        ks, notes = [1], [msg]
    fits, scores = {}, {}
    for k in ks:
        c, labels, hist = _fit_k(pts, k, n_init, tol, max_iter, rng)
        fits[k] = (c, labels, hist)
        scores[k] = silhouette(pts, labels) if k > 1 else 0.0
    eligible = [k for k in ks
                if np.bincount(fits[k][1], minlength=k).min() / n >= min_share]
    if eligible:
        chosen = max(eligible, key=lambda k: (scores[k], -k))
    else:
        chosen = ks[0]
        msg = f"no k meets the minimum share {min_share}; using k={chosen}"
        warnings.warn(msg, DegenerateClusterWarning, stacklevel=2)
        notes.append(msg)
    c, labels, hist = fits[chosen]
    shares = np.bincount(labels, minlength=chosen) / n
    return ClusterModel(chosen, c, labels, scores[chosen], shares, hist[-1], hist,
                        scores, notes)


def merge_small(model: ClusterModel, points, min_share: float = 0.01) -> ClusterModel:
    """Fold clusters below ``min_share`` into their nearest larger cluster."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    labels = model.labels.copy()
    cents = model.centroids.copy()
    while True:
        shares = np.bincount(labels, minlength=cents.shape[0]) / labels.size
        alive = np.flatnonzero(shares > 0)
        small = [j for j in alive if shares[j] < min_share]
        if not small or alive.size == 1:
            break
        j = min(small, key=lambda s: (shares[s], s))
        others = [o for o in alive if o != j]
        dist = ((cents[others] - cents[j]) ** 2).sum(axis=1)
        target = others[int(np.argmin(dist))]
        labels[labels == j] = target
        cents[target] = pts[labels == target].mean(axis=0)
    keep = np.unique(labels)
    remap = {old: new for new, old in enumerate(keep)}
    labels = np.array([remap[l] for l in labels], dtype=np.int64)
    cents = cents[keep]
    shares = np.bincount(labels) / labels.size
    inertia = float(((pts - cents[labels]) ** 2).sum())
    score = silhouette(pts, labels) if keep.size > 1 else 0.0
    return ClusterModel(keep.size, cents, labels, score, shares, inertia,
                        model.history, model.scores,
                        model.notes + ["small clusters merged into nearest neighbours"])


@dataclass
class ClusterProfile:
    order: list[int]              # cluster ids from least to most benefiting
    mean_iate: np.ndarray         # in ``order``
    shares: np.ndarray
    covariates: list[str]
    means: np.ndarray             # (k, n_cov) in ``order``

    @property
    def least(self) -> int:
        return self.order[0]

    @property
    def most(self) -> int:
        return self.order[-1]

    def rows(self) -> list[dict]:
        out = [{"variable": "mean IATE", "least": float(self.mean_iate[0]),
                "most": float(self.mean_iate[-1]),
                "least_minus_most": float(self.mean_iate[0] - self.mean_iate[-1])},
               {"variable": "share", "least": float(self.shares[0]),
                "most": float(self.shares[-1]),
                "least_minus_most": float(self.shares[0] - self.shares[-1])}]
        for j, c in enumerate(self.covariates):
            lo, hi = float(self.means[0, j]), float(self.means[-1, j])
            out.append({"variable": c, "least": lo, "most": hi,
                        "least_minus_most": lo - hi})
        return out

    def to_csv(self, path) -> None:
        write_table(path, self.rows(), ["variable", "least", "most", "least_minus_most"])


def profile_clusters(model: ClusterModel, data: Dataset, covariates: Sequence[str],
                     iate, column: int = 0) -> ClusterProfile:
    """Covariate means per cluster, ordered by the cluster's mean IATE."""
    iate = np.asarray(iate, dtype=float)
    if iate.ndim == 1:
        iate = iate[:, None]
    if iate.shape[0] != data.n or model.labels.shape[0] != data.n:
        raise ValueError("clusters, IATEs and data must have the same rows")
    x = np.column_stack([data.column(c) for c in covariates]) if covariates \
        else np.zeros((data.n, 0))
    k = model.k
    mean_iate = np.array([iate[model.labels == j, column].mean() for j in range(k)])
    order = [int(j) for j in np.lexsort((np.arange(k), mean_iate))]
    means = np.array([x[model.labels == j].mean(axis=0) for j in order]).reshape(k, -1)
    shares = np.bincount(model.labels, minlength=k)[order] / data.n
    return ClusterProfile(order, mean_iate[order], shares, list(covariates), means)
