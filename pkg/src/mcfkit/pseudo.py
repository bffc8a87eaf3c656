"""Pseudo programme start dates for non-participants.

A regression forest learns the start month of participants from their
covariates; each control gets the rounded prediction as a pseudo start
and is dropped if their unemployment spell ended before it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, write_table
from .forest import ForestModel, ForestParams, fit_regression


@dataclass(frozen=True)
class PseudoStartConfig:
    train_share: float = 0.20
    horizon: int = 6
    seed: int = 0
    forest: ForestParams = ForestParams(n_trees=200)

    def __post_init__(self):
        if not 0 < self.train_share < 1:
            raise ValueError("train_share must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def training_draw(n: int, cfg: PseudoStartConfig) -> np.ndarray:
    """Sorted row indices of the random training share; deterministic in the seed."""
    rng = np.random.default_rng([cfg.seed, 0x5053])
    size = int(round(cfg.train_share * n))
    return np.sort(rng.choice(n, size=size, replace=False))


def fit_start_model(data: Dataset, start_month, cfg: PseudoStartConfig = PseudoStartConfig(),
                    treated=None) -> ForestModel:
    """Regression forest of start month on covariates.

    Trained on treated rows among a ``train_share`` random draw of ``data``.
    ``treated`` defaults to ``data.d != 0``.
    """
    start_month = np.asarray(start_month, dtype=float)
    if start_month.shape[0] != data.n:
        raise ValueError("start_month length does not match the data")
    treated = data.d != 0 if treated is None else np.asarray(treated, dtype=bool)
    draw = training_draw(data.n, cfg)
    rows = draw[treated[draw]]
    if rows.size == 0:
        raise ValueError("no treated observations in the training draw")
    target = start_month[rows]
    if np.any((target < 1) | (target > cfg.horizon)):
        raise ValueError(f"start months must lie in [1, {cfg.horizon}]")
    params = cfg.forest
    if params.seed != cfg.seed:
        params = ForestParams(**{**params.__dict__, "seed": cfg.seed})
    return fit_regression(data.x[rows], target, params,
                          feature_kinds=data.covariate_kinds)


def pseudo_month(prediction, horizon: int) -> np.ndarray:
    """Nearest integer (halves round up), clamped to [1, horizon]."""
    pred = np.asarray(prediction, dtype=float)
    return np.clip(np.floor(pred + 0.5), 1, horizon).astype(np.int64)


@dataclass
class PseudoAssignment:
    ids: np.ndarray
    prediction: np.ndarray
    month: np.ndarray
    kept: np.ndarray

    @property
    def kept_share(self) -> float:
        return float(self.kept.mean()) if self.kept.size else 0.0

    def to_csv(self, path) -> None:
        rows = [{"id": i, "prediction": float(p), "pseudo_month": int(m),
                 "kept": bool(k)}
                for i, p, m, k in zip(self.ids, self.prediction, self.month, self.kept)]
        write_table(path, rows, ["id", "prediction", "pseudo_month", "kept"])


def filter_by_month(month, duration) -> np.ndarray:
    """Control stays iff still unemployed at the pseudo start (duration >= month)."""
    duration = np.asarray(duration, dtype=float)
    if np.any(duration < 0):
        raise ValueError("durations must be non-negative")
    return duration >= np.asarray(month)


def assign_and_filter(controls: Dataset, model: ForestModel, duration,
                      cfg: PseudoStartConfig = PseudoStartConfig()):
    """Pseudo start months for controls and the subset still unemployed then."""
    duration = np.asarray(duration, dtype=float)
    if duration.shape[0] != controls.n:
        raise ValueError("duration length does not match the controls")
    if controls.n == 0:
        empty = np.zeros(0)
        return controls, PseudoAssignment(empty, empty, empty.astype(np.int64),
                                          empty.astype(bool))
    pred = model.predict(controls.x)
    month = pseudo_month(pred, cfg.horizon)
    kept = filter_by_month(month, duration)
    ids = controls.ids if controls.ids is not None else np.arange(controls.n)
    return controls.subset(np.flatnonzero(kept)), PseudoAssignment(ids, pred, month, kept)
