"""Batch pipeline: describe, support, pseudo, fit, effects, policy, cluster.

Every stage reads a JSON config (bundled default plus ``--config`` file
plus ``--set key=value`` overrides), writes its tables into
``<out>/<stage>/`` together with a ``manifest.json`` and only replaces the
previous artifacts of that stage once it has finished.

Exit codes: 0 ok, 2 configuration error (including a missing upstream
artifact), 3 data error, 4 estimation failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import shutil
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import kmeanspp_fit, lloyd, kmeanspp_seed, merge_small, profile_clusters
from .data import (DataError, Dataset, describe_by_treatment, load_csv, load_schema,
                   save_schema, standardized_difference, write_csv, write_table)
from .effects import (EstimationError, ate, atet, bgate, contrast_label,
                      effect_curve, gate, iate_table, iates, write_effects)
from .forest import ForestParams, fit_classification, predict_proba
from .mcf import (CausalForest, McfParams, UndefinedPredictionError, best_split,
                  fit_mcf, local_centering, split_objective, write_weight_triplets)
from .policy import (Constraints, InfeasibleConstraintsError, best_score_allocation,
                     evaluate_policy, fit_policy_tree, fit_sequential_tree,
                     random_allocation, three_way_split, write_allocation_table)
from .pseudo import PseudoStartConfig, assign_and_filter, fit_start_model
from .support import SupportRule, support_diagnostics, trim
from .synth import (DgpSpec, brute_force_tree_oracle, generate, naive_std_diff,
                    naive_trim)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4
STAGES = ("describe", "support", "pseudo", "fit", "effects", "policy", "cluster")

# config fields whose type is checked by the semantic validation instead
_FREE_FIELDS = {"paths.data", "paths.schema", "paths.truth", "describe.covariates",
                "support.key_covariates", "fit.mtry", "fit.penalty_weight",
                "fit.max_depth", "effects.gate", "effects.bgate", "policy.features",
                "policy.sequential", "policy.constraints", "policy.max_split_points",
                "cluster.covariates", "simulate.intercepts", "fit.outcome",
                "effects.outcome", "policy.outcome", "cluster.outcome"}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MissingArtifactError(ConfigError):
    """A stage was run before the stage that produces its input."""


# --------------------------------------------------------------------------
# configuration

def default_config() -> dict:
    text = resources.files("mcfkit.configs").joinpath("default.json").read_text("utf-8")
    return json.loads(text)


def _check_types(value, template, path):
    if path in _FREE_FIELDS:
        return
    if isinstance(template, dict):
        if not isinstance(value, dict):
            raise ConfigError(path or "<root>", "expected an object")
        for key, sub in value.items():
            where = f"{path}.{key}" if path else key
            if key not in template:
                raise ConfigError(where, "unknown field")
            _check_types(sub, template[key], where)
        return
    if isinstance(template, bool):
        ok = isinstance(value, bool)
    elif isinstance(template, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(template, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(template, str):
        ok = isinstance(value, str)
    elif isinstance(template, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(path, f"expected {type(template).__name__}, "
                                f"got {type(value).__name__}")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in place; the value is read as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(".".join(parts[:i + 1]), "unknown section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown field")
    node[parts[-1]] = value


def _validate(cfg: dict) -> None:
    f = cfg["fit"]
    fr = f["fractions"]
    if len(fr) != 3 or any(not isinstance(v, (int, float)) or v < 0 for v in fr) \
            or abs(sum(fr) - 1) > 1e-9:
        raise ConfigError("fit.fractions", "need three non-negative shares summing to 1")
    for key in ("n_trees", "min_leaf", "centering_trees", "centering_min_leaf"):
        if f[key] < 1:
            raise ConfigError(f"fit.{key}", "must be >= 1")
    if f["centering_folds"] < 2:
        raise ConfigError("fit.centering_folds", "must be >= 2")
    if not 0 < f["subsample"] <= 1:
        raise ConfigError("fit.subsample", "must lie in (0, 1]")
    s = cfg["support"]
    if s["variant"] not in ("minmax", "quantile"):
        raise ConfigError("support.variant", "must be 'minmax' or 'quantile'")
    if not 0 <= s["q_low"] < s["q_high"] <= 1:
        raise ConfigError("support.q_low", "need 0 <= q_low < q_high <= 1")
    p = cfg["pseudo"]
    if not 0 < p["train_share"] < 1:
        raise ConfigError("pseudo.train_share", "must lie in (0, 1)")
    if p["horizon"] < 1:
        raise ConfigError("pseudo.horizon", "must be >= 1")
    pol = cfg["policy"]
    for key in ("depth", "constrained_depth"):
        if not 0 <= pol[key] <= 4:
            raise ConfigError(f"policy.{key}", "must lie in 0..4")
    seq = pol["sequential"]
    if seq is not None and (not isinstance(seq, list) or len(seq) != 2
                            or any(not isinstance(v, int) or v < 0 for v in seq)):
        raise ConfigError("policy.sequential", "must be null or [depth_a, depth_b]")
    con = pol["constraints"]
    if not (con is None or con == "observed" or (
            isinstance(con, list) and all(c is None or isinstance(c, (int, float))
                                          for c in con))):
        raise ConfigError("policy.constraints",
                          "must be null, 'observed' or a list of shares/nulls")
    c = cfg["cluster"]
    if not 1 <= c["k_min"] <= c["k_max"]:
        raise ConfigError("cluster.k_min", "need 1 <= k_min <= k_max")
    if not 0 <= c["min_share"] < 1:
        raise ConfigError("cluster.min_share", "must lie in [0, 1)")
    bg = cfg["effects"]["bgate"]
    if not isinstance(bg, list):
        raise ConfigError("effects.bgate", "must be a list")
    for i, item in enumerate(bg):
        if not isinstance(item, dict) or not isinstance(item.get("z"), str) \
                or not isinstance(item.get("balancing", []), list):
            raise ConfigError(f"effects.bgate[{i}]",
                              "need {'z': name, 'balancing': [names]}")


def load_config(path=None, overrides=(), seed=None, out=None) -> dict:
    cfg = default_config()
    template = copy.deepcopy(cfg)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        _check_types(user, template, "")
        cfg = _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["paths"]["out"] = str(out)
    _check_types(cfg, template, "")
    _validate(cfg)
    return cfg


def config_digest(cfg: dict) -> str:
    """Hash of the config without file locations; inputs are hashed by content."""
    trimmed = copy.deepcopy(cfg)
    trimmed.pop("paths", None)
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------
# stage plumbing

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Stage:
    """Collects one stage's outputs in a scratch directory, then swaps it in."""

    def __init__(self, name: str, cfg: dict):
        self.name = name
        self.cfg = cfg
        self.out = Path(cfg["paths"]["out"])
        self.final = self.out / name
        self.tmp = self.out / f".{name}.partial"
        self.inputs: dict[str, str] = {}
        self.notes: list[str] = []

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir()
        self._warn = warnings.catch_warnings(record=True)
        self.caught = self._warn.__enter__()
        warnings.simplefilter("always")
        return self

    def __exit__(self, exc_type, exc, tb):
        self._warn.__exit__(exc_type, exc, tb)
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        self._write_manifest()
        if self.final.exists():
            shutil.rmtree(self.final)
        self.tmp.rename(self.final)
        return False

    def path(self, name: str) -> Path:
        return self.tmp / name

    def use(self, label: str, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise DataError(f"{label}: file not found: {path}")
        self.inputs[label] = _sha256(path)
        return path

    def _write_manifest(self) -> None:
        outputs = {p.name: _sha256(p) for p in sorted(self.tmp.iterdir())}
        notes = self.notes + sorted({str(w.message) for w in self.caught})
        manifest = {"stage": self.name, "version": __version__,
                    "seed": self.cfg["seed"], "config_sha256": config_digest(self.cfg),
                    "inputs": dict(sorted(self.inputs.items())),
                    "outputs": outputs, "notes": notes}
        with open(self.tmp / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _require(cfg: dict, stage: str, filename: str, needed_by: str) -> Path:
    path = Path(cfg["paths"]["out"]) / stage / filename
    if not path.exists():
        raise MissingArtifactError(
            f"{stage}/{filename}",
            f"missing dependency for '{needed_by}': run 'mcfkit {stage}' first")
    return path


def _load_input_data(st: _Stage) -> Dataset:
    paths = st.cfg["paths"]
    for key in ("data", "schema"):
        if not paths[key]:
            raise ConfigError(f"paths.{key}", "required for this stage")
    schema = load_schema(st.use("schema", paths["schema"]))
    return load_csv(st.use("data", paths["data"]), schema)


def _load_stage_sample(st: _Stage, stage: str) -> Dataset:
    data_path = _require(st.cfg, stage, "sample.csv", st.name)
    schema_path = _require(st.cfg, stage, "schema.json", st.name)
    schema = load_schema(st.use(f"{stage}/schema.json", schema_path))
    return load_csv(st.use(f"{stage}/sample.csv", data_path), schema)


def _write_sample(st: _Stage, data: Dataset) -> None:
    write_csv(data, st.path("sample.csv"))
    save_schema(data.schema, st.path("schema.json"))


def _check_columns(data: Dataset, names, field: str, covariates_only: bool = True):
    if names is None:
        return
    allowed = set(data.covariate_names)
    if not covariates_only:
        allowed |= set(data.aux) | set(data.outcome_names)
    for i, nm in enumerate(names):
        if nm not in allowed:
            raise ConfigError(f"{field}[{i}]", f"unknown column {nm!r}")


def _outcome_index(data: Dataset, value, field: str) -> int:
    m = len(data.outcome_names)
    if isinstance(value, str):
        if value not in data.outcome_names:
            raise ConfigError(field, f"unknown outcome {value!r}")
        return data.outcome_names.index(value)
    if not -m <= int(value) < m:
        raise ConfigError(field, f"outcome index {value} out of range for {m} outcome(s)")
    return int(value) % m


def _ids(data: Dataset) -> np.ndarray:
    return data.ids if data.ids is not None else np.arange(data.n).astype(str)


# --------------------------------------------------------------------------
# stages

def stage_describe(cfg: dict) -> None:
    with _Stage("describe", cfg) as st:
        data = _load_input_data(st)
        c = cfg["describe"]
        _check_columns(data, c["covariates"], "describe.covariates")
        report = describe_by_treatment(data, c["control"], c["covariates"])
        report.to_csv(st.path("descriptives.csv"))
        report.to_json(st.path("descriptives.json"))
        st.notes += report.notes


def stage_support(cfg: dict) -> None:
    with _Stage("support", cfg) as st:
        data = _load_input_data(st)
        c = cfg["support"]
        _check_columns(data, c["key_covariates"], "support.key_covariates")
        if data.n == 0:
            raise DataError("support: the data set is empty")
        params = ForestParams(n_trees=c["n_trees"], min_leaf=c["min_leaf"],
                              seed=cfg["seed"])
        model = fit_classification(data.x, data.d, params, n_classes=data.n_treatments,
                                   feature_kinds=data.covariate_kinds)
        prop = predict_proba(model, data.x, oob=True)
        rule = SupportRule(c["variant"], c["q_low"], c["q_high"]) \
            if c["variant"] == "quantile" else SupportRule.minmax()
        report = trim(prop, data.d, rule)
        ids = _ids(data)
        k = data.n_treatments
        rows = [{"id": ids[i], **{f"p_{a}": float(prop[i, a]) for a in range(k)},
                 "kept": bool(report.keep[i])} for i in range(data.n)]
        write_table(st.path("propensities.csv"), rows,
                    ["id"] + [f"p_{a}" for a in range(k)] + ["kept"])
        write_table(st.path("bounds.csv"), report.bounds_rows(),
                    ["column", "lower", "upper", "collapsed"])
        diag = support_diagnostics(data, report, c["key_covariates"])
        diag.to_csv(st.path("diagnostics.csv"))
        st.notes += report.warnings + diag.notes
        st.notes.append(f"dropped {report.n_dropped} of {data.n} rows")
        _write_sample(st, data.subset(report.keep))


def stage_pseudo(cfg: dict) -> None:
    with _Stage("pseudo", cfg) as st:
        data = _load_stage_sample(st, "support")
        c = cfg["pseudo"]
        if not c["enabled"]:
            st.notes.append("pseudo start dates disabled; sample passed through")
            _write_sample(st, data)
            return
        for key in ("start_column", "duration_column"):
            if c[key] not in data.aux and c[key] not in data.covariate_names:
                raise ConfigError(f"pseudo.{key}", f"unknown column {c[key]!r}")
        ref = cfg["effects"]["reference"]
        pcfg = PseudoStartConfig(c["train_share"], c["horizon"], cfg["seed"],
                                 ForestParams(n_trees=c["n_trees"], min_leaf=c["min_leaf"],
                                              seed=cfg["seed"]))
        treated = data.d != ref
        model = fit_start_model(data, data.column(c["start_column"]), pcfg, treated)
        controls = np.flatnonzero(~treated)
        duration = data.column(c["duration_column"])[controls]
        _, audit = assign_and_filter(data.subset(controls), model, duration, pcfg)
        audit.to_csv(st.path("audit.csv"))
        keep = treated.copy()
        keep[controls[audit.kept]] = True
        st.notes.append(f"kept {int(audit.kept.sum())} of {controls.size} controls")
        _write_sample(st, data.subset(keep))


def stage_fit(cfg: dict) -> None:
    with _Stage("fit", cfg) as st:
        data = _load_stage_sample(st, "pseudo")
        c = cfg["fit"]
        seed = cfg["seed"]
        if data.n == 0:
            raise DataError("fit: the analysis sample is empty")
        outcome = _outcome_index(data, c["outcome"], "fit.outcome")
        tr, es, va = three_way_split(data.d, c["fractions"], seed)
        if c["centering"]:
            centred, yhat = local_centering(
                data, c["centering_folds"],
                ForestParams(n_trees=c["centering_trees"], min_leaf=c["centering_min_leaf"]),
                seed)
        else:
            centred, yhat = data, np.zeros_like(data.y)
        try:
            params = McfParams(n_trees=c["n_trees"], mtry=c["mtry"], min_leaf=c["min_leaf"],
                               penalty_weight=c["penalty_weight"], subsample=c["subsample"],
                               max_depth=c["max_depth"], outcome=outcome, seed=seed)
            params.validate(data.x.shape[1])
        except ValueError as exc:
            raise ConfigError("fit", str(exc)) from None
        forest = fit_mcf(centred.subset(tr), centred.subset(es), params)
        forest.save(st.path("forest.json"))
        ids = _ids(data)
        part = np.empty(data.n, dtype=object)
        for name, rows in (("train", tr), ("estimation", es), ("validation", va)):
            part[rows] = name
        write_table(st.path("split.csv"), [{"id": ids[i], "part": part[i]}
                                           for i in range(data.n)], ["id", "part"])
        cols = [f"yhat_{nm}" for nm in data.outcome_names]
        write_table(st.path("centering.csv"),
                    [{"id": ids[i], **{cn: float(yhat[i, m]) for m, cn in enumerate(cols)}}
                     for i in range(data.n)], ["id"] + cols)
        _write_sample(st, data)


def _fitted(st: _Stage):
    """Forest, raw sample, centred sample, centring predictions and split labels."""
    forest_path = _require(st.cfg, "fit", "forest.json", st.name)
    forest = CausalForest.load(st.use("fit/forest.json", forest_path))
    data = _load_stage_sample(st, "fit")
    yhat = _read_columns(st.use("fit/centering.csv",
                                _require(st.cfg, "fit", "centering.csv", st.name)))
    part = _read_columns(st.use("fit/split.csv",
                                _require(st.cfg, "fit", "split.csv", st.name)),
                         numeric=False)[:, 0]
    if yhat.shape[0] != data.n or part.shape[0] != data.n:
        raise DataError("fit artifacts disagree on the number of rows")
    return forest, data, data.with_outcomes(data.y - yhat), yhat, part


def _read_columns(path: Path, numeric: bool = True) -> np.ndarray:
    """All columns after the id column of a CSV written by ``write_table``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    vals = [r[1:] for r in rows]
    width = len(vals[0]) if vals else 0
    if numeric:
        return np.array(vals, dtype=float).reshape(len(vals), width)
    return np.array(vals, dtype=object).reshape(len(vals), width)


def _contrasts(data: Dataset, cfg: dict):
    ref = cfg["effects"]["reference"]
    if not 0 <= ref < data.n_treatments:
        raise ConfigError("effects.reference", f"no arm {ref}")
    return [(a, ref) for a in range(data.n_treatments) if a != ref]


def stage_effects(cfg: dict) -> None:
    with _Stage("effects", cfg) as st:
        forest, data, centred, yhat, _ = _fitted(st)
        c = cfg["effects"]
        o = _outcome_index(data, c["outcome"], "effects.outcome")
        contrasts = _contrasts(data, cfg)
        tol = c["max_undefined_share"]
        rows = []
        for con in contrasts:
            rows.append(ate(forest, centred, con, o, tol))
            for arm in con:
                if np.any(data.d == arm):
                    rows.append(atet(forest, centred, con, arm, o, tol))
        write_effects(st.path("effects.csv"), rows)

        zs = c["gate"] if c["gate"] is not None else data.names_with_role("heterogeneity")
        _check_columns(data, zs, "effects.gate")
        for i, item in enumerate(c["bgate"]):
            _check_columns(data, [item["z"]], f"effects.bgate[{i}].z")
            _check_columns(data, item.get("balancing", []), f"effects.bgate[{i}].balancing")
        group_rows = []
        for con in contrasts:
            for z in zs:
                group_rows += gate(forest, centred, con, z, o, max_undefined_share=tol).all()[1:]
            for item in c["bgate"]:
                res = bgate(forest, centred, con, item["z"], item.get("balancing", []), o,
                            max_undefined_share=tol)
                group_rows += res.all()[1:]
                st.notes += res.notes
        write_effects(st.path("gates.csv"), group_rows)

        if c["curve"] and len(data.outcome_names) > 1:
            for con in contrasts:
                effect_curve(forest, centred, con, max_undefined_share=tol).to_csv(
                    st.path(f"curve_{contrast_label(con)}.csv"))
        table = iate_table(forest, centred, contrasts, o)
        for i, row in enumerate(table):
            for a in range(forest.n_arms):
                row[f"mu_{a}"] += float(yhat[i, o])
        cols = ["id"] + [f"mu_{a}" for a in range(forest.n_arms)]
        for con in contrasts:
            cols += [f"iate_{contrast_label(con)}", f"se_{contrast_label(con)}"]
        write_table(st.path("iates.csv"), table, cols)
        n_w = min(int(c["export_weights"]), data.n)
        if n_w > 0:
            write_weight_triplets(st.path("weights.csv"), forest, data.x[:n_w])


def _policy_inputs(forest, data, centred, yhat, o):
    mu = forest.weights(centred.x).mu(forest.est_y[:, o]) + yhat[:, [o]]
    defined = np.all(np.isfinite(mu), axis=1)
    return mu, defined


def _read_truth(st: _Stage, data: Dataset, o: int, n_arms: int):
    path = st.cfg["paths"]["truth"]
    if not path:
        return None
    with open(st.use("truth", path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        table = {row["id"]: row for row in reader}
    months = len(data.outcome_names)
    keys = [f"y_{a}" if months == 1 else f"y_{a}_m{o + 1}" for a in range(n_arms)]
    try:
        return np.array([[float(table[str(i)][k]) for k in keys] for i in _ids(data)])
    except KeyError as exc:
        raise DataError(f"truth file lacks {exc}") from None


def stage_policy(cfg: dict) -> None:
    with _Stage("policy", cfg) as st:
        forest, data, centred, yhat, part = _fitted(st)
        c = cfg["policy"]
        seed = cfg["seed"]
        o = _outcome_index(data, c["outcome"], "policy.outcome")
        names = c["features"] if c["features"] is not None else data.names_with_role("policy")
        if not names:
            raise ConfigError("policy.features", "no policy variables")
        _check_columns(data, names, "policy.features")
        kinds = [data.covariate_kinds[data.index_of(nm)] for nm in names]
        v = np.column_stack([data.column(nm) for nm in names])
        mu, defined = _policy_inputs(forest, data, centred, yhat, o)
        if not defined.all():
            st.notes.append(f"{int((~defined).sum())} rows without a defined prediction "
                            "left out of the policy stage")
        learn = defined & (part != "validation")
        hold = defined & (part == "validation")
        if not learn.any() or not hold.any():
            raise EstimationError("policy needs rows in the learning and validation parts")
        k = forest.n_arms
        ref = cfg["effects"]["reference"]
        observed = np.bincount(data.d, minlength=k) / data.n
        con = c["constraints"]
        if con == "observed":
            constraints = Constraints(tuple(None if a == ref else float(observed[a])
                                            for a in range(k)))
        elif con is None:
            constraints = None
        else:
            if len(con) != k:
                raise ConfigError("policy.constraints", f"need {k} entries")
            try:
                constraints = Constraints(tuple(con))
            except ValueError as exc:
                raise ConfigError("policy.constraints", str(exc)) from None
        kw = dict(kinds=kinds, feature_names=names, max_split_points=c["max_split_points"])
        s_l, v_l = mu[learn], v[learn]
        trees = {"unconstrained": fit_policy_tree(s_l, v_l, c["depth"], None, **kw)}
        if constraints is not None:
            trees["constrained"] = fit_policy_tree(s_l, v_l, c["constrained_depth"],
                                                   constraints, **kw)
        if c["sequential"] is not None:
            a, b = c["sequential"]
            trees["sequential"] = fit_sequential_tree(s_l, v_l, a, b, constraints, **kw)
        for name, tree in trees.items():
            tree.to_json(st.path(f"tree_{name}.json"))
            st.path(f"tree_{name}.txt").write_text(tree.to_text(), encoding="utf-8")
            if constraints is not None and name != "unconstrained":
                ok = constraints.satisfied(tree.predict(v_l))
                st.notes.append(f"{name} tree meets caps in-sample: {ok}")

        s_h, v_h = mu[hold], v[hold]
        allocations = {"observed": data.d[hold],
                       "random": random_allocation(observed, int(hold.sum()), seed),
                       "best score": best_score_allocation(s_h)}
        if constraints is not None:
            allocations["best score (capped)"] = best_score_allocation(s_h, constraints)
        for name, tree in trees.items():
            allocations[f"tree {name}"] = tree.predict(v_h)
        write_allocation_table(st.path("allocations.csv"),
                               [evaluate_policy(al, s_h, nm) for nm, al in allocations.items()])
        truth = _read_truth(st, data, o, k)
        if truth is not None:
            t_h = truth[hold]
            write_allocation_table(st.path("allocations_oracle.csv"),
                                   [evaluate_policy(al, t_h, nm)
                                    for nm, al in allocations.items()])


def stage_cluster(cfg: dict) -> None:
    with _Stage("cluster", cfg) as st:
        forest, data, centred, _, _ = _fitted(st)
        c = cfg["cluster"]
        o = _outcome_index(data, c["outcome"], "cluster.outcome")
        _check_columns(data, c["covariates"], "cluster.covariates")
        contrasts = _contrasts(data, cfg)
        pts = iates(forest, centred.x, contrasts, o)
        ok = np.all(np.isfinite(pts), axis=1)
        if c["k_max"] > ok.sum():
            raise ConfigError("cluster.k_max", f"exceeds the {int(ok.sum())} usable rows")
        model = kmeanspp_fit(pts[ok], range(c["k_min"], c["k_max"] + 1), c["min_share"],
                             c["n_init"], seed=cfg["seed"])
        if c["merge_small"]:
            model = merge_small(model, pts[ok], c["min_share"])
        st.notes += model.notes
        ids = _ids(data)[ok]
        write_table(st.path("assignments.csv"),
                    [{"id": i, "cluster": int(lab)} for i, lab in zip(ids, model.labels)],
                    ["id", "cluster"])
        write_table(st.path("silhouette.csv"),
                    [{"k": k, "silhouette": float(s), "chosen": k == model.k}
                     for k, s in sorted(model.scores.items())], ["k", "silhouette", "chosen"])
        covs = c["covariates"] if c["covariates"] is not None else data.covariate_names
        profile = profile_clusters(model, data.subset(ok), covs, pts[ok])
        profile.to_csv(st.path("profile.csv"))


def stage_simulate(cfg: dict) -> None:
    s = cfg["simulate"]
    fields = {k: (tuple(v) if isinstance(v, list) else v) for k, v in s.items()}
    try:
        spec = DgpSpec(**fields, seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("simulate", str(exc)) from None
    cfg = copy.deepcopy(cfg)
    with _Stage("data", cfg) as st:
        data, truth = generate(spec)
        write_csv(data, st.path("data.csv"))
        save_schema(data.schema, st.path("schema.json"))
        truth.to_csv(st.path("truth.csv"), _ids(data))
    base = Path(cfg["paths"]["out"]) / "data"
    cfg["paths"].update(data=str(base / "data.csv"), schema=str(base / "schema.json"),
                        truth=str(base / "truth.csv"))
    for name in STAGES:
        STAGE_FUNCS[name](cfg)


def _verify_split(cfg, rng) -> tuple[int, int]:
    fails = 0
    n_nodes = cfg["verify"]["split_nodes"]
    for _ in range(n_nodes):
        n = int(rng.integers(16, 40))
        x = np.column_stack([rng.normal(size=n), rng.integers(0, 3, n)]).astype(float)
        d = rng.integers(0, 2, n)
        d[:2] = [0, 1]
        y = rng.normal(size=n)
        kinds = ("continuous", "ordered")
        lam = float(rng.uniform(0, 1))
        fast = best_split(x, y, d.astype(np.int64), kinds, np.arange(2), 2, 2, lam)
        best = np.inf
        for j in range(2):
            for t in np.unique(x[:, j])[:-1]:
                best = min(best, split_objective(x, y, d, x[:, j] <= t, kinds, lam, 2))
        fast_score = fast[0] if fast is not None else np.inf
        if not (np.isinf(best) and np.isinf(fast_score)) and abs(best - fast_score) > 1e-9:
            fails += 1
    return n_nodes, fails


def stage_verify(cfg: dict) -> int:
    v = cfg["verify"]
    rng = np.random.default_rng([cfg["seed"], 0x5646])
    results = []
    fails = 0
    for i in range(v["policy_instances"]):
        n = int(rng.integers(4, 30))
        scores = rng.integers(-64, 64, size=(n, 3)) / 64.0
        feats = rng.integers(0, 2, size=(n, 2)).astype(float)
        caps = None if i % 2 == 0 else (None, float(rng.choice([0.2, 0.4])), None)
        cons = Constraints(caps) if caps else None
        oracle = brute_force_tree_oracle(scores, feats, 2, caps)
        tree = fit_policy_tree(scores, feats, 2, cons, kinds=("ordered", "ordered"))
        fails += tree.value != oracle.value
    results.append({"suite": "policy tree vs brute force", "cases": v["policy_instances"],
                    "failures": int(fails)})
    fails = 0
    for _ in range(v["trim_fixtures"]):
        n, k = int(rng.integers(6, 40)), int(rng.integers(2, 4))
        p = rng.dirichlet(np.ones(k), size=n)
        g = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        for rule, args in ((SupportRule.minmax(), ("minmax",)),
                           (SupportRule.quantile(0.1, 0.9), ("quantile", 0.1, 0.9))):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                keep = trim(p, g, rule).keep
            fails += not np.array_equal(keep, naive_trim(p, g, *args))
    results.append({"suite": "trimming vs per-definition oracle",
                    "cases": 2 * v["trim_fixtures"], "failures": int(fails)})
    fails = 0
    for _ in range(v["trim_fixtures"]):
        a, b = rng.normal(size=int(rng.integers(2, 30))), rng.normal(1, 2, int(rng.integers(2, 30)))
        fails += abs(standardized_difference(a, b) - naive_std_diff(a, b)) > 1e-9
    results.append({"suite": "standardized difference vs explicit sums",
                    "cases": v["trim_fixtures"], "failures": int(fails)})
    n_nodes, fails = _verify_split(cfg, rng)
    results.append({"suite": "fast split scan vs objective oracle", "cases": n_nodes,
                    "failures": int(fails)})
    fails = 0
    for _ in range(5):
        pts = rng.normal(size=(60, 2))
        _, _, hist = lloyd(pts, kmeanspp_seed(pts, 3, rng))
        fails += any(b > a + 1e-9 * max(1.0, a) for a, b in zip(hist, hist[1:]))
    results.append({"suite": "Lloyd objective nonincreasing", "cases": 5,
                    "failures": int(fails)})
    with _Stage("verify", cfg) as st:
        write_table(st.path("report.csv"), results, ["suite", "cases", "failures"])
    for r in results:
        status = "ok" if r["failures"] == 0 else "FAILED"
        print(f"{r['suite']}: {r['cases']} cases, {r['failures']} failures [{status}]")
    return EXIT_OK if all(r["failures"] == 0 for r in results) else EXIT_ESTIMATION


STAGE_FUNCS = {"describe": stage_describe, "support": stage_support,
               "pseudo": stage_pseudo, "fit": stage_fit, "effects": stage_effects,
               "policy": stage_policy, "cluster": stage_cluster}


# --------------------------------------------------------------------------
# entry points

def run(command: str, config=None, overrides=(), seed=None, out=None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        cfg = load_config(config, overrides, seed, out)
        if command == "simulate":
            stage_simulate(cfg)
        elif command == "verify":
            return stage_verify(cfg)
        elif command in STAGE_FUNCS:
            STAGE_FUNCS[command](cfg)
        else:
            raise ConfigError("command", f"unknown subcommand {command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, UndefinedPredictionError, InfeasibleConstraintsError,
            ValueError, ArithmeticError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcfkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("simulate", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config merged over the bundled default")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path override, value read as JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.overrides, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
