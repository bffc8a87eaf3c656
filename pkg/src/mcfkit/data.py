"""Dataset schema, CSV ingestion and descriptive statistics."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("continuous", "ordered", "unordered")
ROLES = ("confounder", "heterogeneity", "balancing", "policy",
         "treatment", "outcome", "id", "auxiliary")
EXCLUSIVE_ROLES = ("treatment", "outcome", "id", "auxiliary")
COVARIATE_ROLES = ("confounder", "heterogeneity", "balancing", "policy")
LARGE_STD_DIFF = 20.0


class DataError(ValueError):
    """Invalid input data; the message names the offending row/column."""


class DegenerateVarianceError(ValueError):
    """Both samples have zero variance but different means."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"
    roles: tuple[str, ...] = ("confounder",)
    # number of categories for unordered columns and for the treatment
    n_categories: int | None = None

    def __post_init__(self):
        roles = (self.roles,) if isinstance(self.roles, str) else tuple(self.roles)
        object.__setattr__(self, "roles", roles)
        if self.kind not in KINDS:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if not roles:
            raise DataError(f"column {self.name!r}: no role given")
        for role in roles:
            if role not in ROLES:
                raise DataError(f"column {self.name!r}: unknown role {role!r}")
        exclusive = [r for r in roles if r in EXCLUSIVE_ROLES]
        if exclusive and len(roles) > 1:
            raise DataError(f"column {self.name!r}: role {exclusive[0]!r} "
                            "cannot be combined with other roles")
        if self.kind == "unordered" and self.n_categories is None:
            raise DataError(f"column {self.name!r}: unordered columns need "
                            "n_categories")
        if "treatment" in roles and (self.n_categories is None
                                     or self.n_categories < 1):
            raise DataError(f"column {self.name!r}: treatment column needs "
                            "n_categories (number of arms)")

    @property
    def is_covariate(self) -> bool:
        return any(r in COVARIATE_ROLES for r in self.roles)

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "roles": list(self.roles)}
        if self.n_categories is not None:
            out["n_categories"] = self.n_categories
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        return cls(name=d["name"], kind=d.get("kind", "continuous"),
                   roles=tuple(d.get("roles", ("confounder",))),
                   n_categories=d.get("n_categories"))


def validate_schema(schema: Sequence[ColumnSpec]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise DataError("duplicate column names in schema")
    n_treat = sum("treatment" in c.roles for c in schema)
    if n_treat != 1:
        raise DataError(f"schema needs exactly one treatment column, got {n_treat}")
    if not any("outcome" in c.roles for c in schema):
        raise DataError("schema needs at least one outcome column")
    if sum("id" in c.roles for c in schema) > 1:
        raise DataError("schema has more than one id column")


def load_schema(path) -> list[ColumnSpec]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    cols = raw["columns"] if isinstance(raw, dict) else raw
    schema = [ColumnSpec.from_dict(c) for c in cols]
    validate_schema(schema)
    return schema


def save_schema(schema: Sequence[ColumnSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"columns": [c.to_dict() for c in schema]}, fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable container for covariates, treatment and outcomes.

    ``x`` holds every covariate column (any of the confounder,
    heterogeneity, balancing or policy roles) in schema order; categorical
    columns are dense 0-based integer codes stored as floats.
    """

    schema: tuple[ColumnSpec, ...]
    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        schema = tuple(self.schema)
        object.__setattr__(self, "schema", schema)
        validate_schema(schema)
        x = np.asarray(self.x, dtype=float)
        d = np.asarray(self.d)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        n = d.shape[0]
        if x.ndim != 2:
            x = x.reshape(n, -1)
        if x.shape[0] != n or y.shape[0] != n:
            raise DataError("x, d and y must have the same number of rows")
        if x.shape[1] != len(self.covariate_names):
            raise DataError(f"x has {x.shape[1]} columns, schema declares "
                            f"{len(self.covariate_names)} covariates")
        if y.shape[1] != len(self.outcome_names):
            raise DataError(f"y has {y.shape[1]} columns, schema declares "
                            f"{len(self.outcome_names)} outcomes")
        if n and not np.all(np.isfinite(y)):
            bad = np.argwhere(~np.isfinite(y))[0]
            raise DataError(f"row {bad[0]}: non-finite outcome in column "
                            f"{self.outcome_names[bad[1]]!r}")
        if n and not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise DataError(f"row {bad[0]}: missing or non-finite value in "
                            f"column {self.covariate_names[bad[1]]!r}")
        if d.dtype.kind == "f":
            if n and (not np.all(np.isfinite(d)) or np.any(d != np.round(d))):
                raise DataError("treatment labels must be integers")
        d = d.astype(np.int64)
        k = self.n_treatments
        if n and (d.min() < 0 or d.max() >= k):
            row = int(np.flatnonzero((d < 0) | (d >= k))[0])
            raise DataError(f"row {row}: treatment label {d[row]} outside "
                            f"0..{k - 1}")
        for j, col in enumerate(self.covariates):
            if col.kind == "unordered" and n:
                v = x[:, j]
                ok = (v == np.round(v)) & (v >= 0) & (v < col.n_categories)
                if not np.all(ok):
                    row = int(np.flatnonzero(~ok)[0])
                    raise DataError(f"row {row}: code {v[row]} of column "
                                    f"{col.name!r} outside 0..{col.n_categories - 1}")
        for arr in (x, d, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", y)
        if self.ids is not None:
            ids = np.asarray(self.ids)
            if ids.shape[0] != n:
                raise DataError("ids length does not match rows")
            object.__setattr__(self, "ids", ids)
        aux = {}
        for key, val in self.aux.items():
            val = np.asarray(val, dtype=float)
            if val.shape[0] != n:
                raise DataError(f"auxiliary column {key!r} length mismatch")
            aux[key] = val
        object.__setattr__(self, "aux", aux)

    @property
    def n(self) -> int:
        return int(self.d.shape[0])

    @property
    def treatment_spec(self) -> ColumnSpec:
        return next(c for c in self.schema if "treatment" in c.roles)

    @property
    def n_treatments(self) -> int:
        return int(self.treatment_spec.n_categories)

    @property
    def covariates(self) -> list[ColumnSpec]:
        return [c for c in self.schema if c.is_covariate]

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.covariates]

    @property
    def covariate_kinds(self) -> list[str]:
        return [c.kind for c in self.covariates]

    @property
    def outcome_names(self) -> list[str]:
        return [c.name for c in self.schema if "outcome" in c.roles]

    def names_with_role(self, role: str) -> list[str]:
        return [c.name for c in self.covariates if role in c.roles]

    def index_of(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        if name in self.covariate_names:
            return self.x[:, self.index_of(name)]
        if name in self.outcome_names:
            return self.y[:, self.outcome_names.index(name)]
        if name in self.aux:
            return self.aux[name]
        if name == self.treatment_spec.name:
            return self.d
        raise DataError(f"unknown column {name!r}")

    def outcome(self, which: int | str = 0) -> np.ndarray:
        if isinstance(which, str):
            which = self.outcome_names.index(which)
        return self.y[:, which]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Dataset(self.schema, self.x[rows], self.d[rows], self.y[rows],
                       None if self.ids is None else self.ids[rows],
                       {k: v[rows] for k, v in self.aux.items()})

    def with_outcomes(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.x, self.d, y, self.ids, self.aux)

    def treatment_counts(self) -> np.ndarray:
        return np.bincount(self.d, minlength=self.n_treatments)


def _format_number(value: float, kind: str) -> str:
    if kind != "continuous" and float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def load_csv(path, schema: Sequence[ColumnSpec]) -> Dataset:
    """Read a CSV file whose header matches ``schema``.

    Raises ``DataError`` naming the file line and column for missing
    columns, unparseable cells and out-of-range codes.
    """
    schema = list(schema)
    validate_schema(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, no header row") from None
        missing = [c.name for c in schema if c.name not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        pos = {c.name: header.index(c.name) for c in schema}
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(rec)} fields, "
                                f"header has {len(header)}")
            parsed = {}
            for col in schema:
                cell = rec[pos[col.name]].strip()
                if "id" in col.roles:
                    parsed[col.name] = cell
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}: line {lineno}, column "
                                    f"{col.name!r}: cannot parse {cell!r}") from None
                if not math.isfinite(value):
                    raise DataError(f"{path}: line {lineno}, column "
                                    f"{col.name!r}: missing/non-finite value")
                if "treatment" in col.roles or col.kind == "unordered":
                    ncat = col.n_categories
                    if not value.is_integer() or not 0 <= value < ncat:
                        raise DataError(f"{path}: line {lineno}, column "
                                        f"{col.name!r}: code {cell} outside "
                                        f"0..{ncat - 1}")
                parsed[col.name] = value
            rows.append(parsed)
    return _from_records(schema, rows)


def _from_records(schema, rows) -> Dataset:
    n = len(rows)
    covs = [c for c in schema if c.is_covariate]
    outs = [c for c in schema if "outcome" in c.roles]
    treat = next(c for c in schema if "treatment" in c.roles)
    id_col = next((c for c in schema if "id" in c.roles), None)
    aux_cols = [c for c in schema if "auxiliary" in c.roles]
    x = np.array([[r[c.name] for c in covs] for r in rows], dtype=float).reshape(n, len(covs))
    y = np.array([[r[c.name] for c in outs] for r in rows], dtype=float).reshape(n, len(outs))
    d = np.array([r[treat.name] for r in rows], dtype=float).astype(np.int64)
    ids = np.array([r[id_col.name] for r in rows]) if id_col else None
    aux = {c.name: np.array([r[c.name] for r in rows], dtype=float) for c in aux_cols}
    return Dataset(tuple(schema), x, d, y, ids, aux)


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` so that ``load_csv`` reproduces it exactly."""
    cov_idx = {name: j for j, name in enumerate(data.covariate_names)}
    out_idx = {name: j for j, name in enumerate(data.outcome_names)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([c.name for c in data.schema])
        for i in range(data.n):
            rec = []
            for col in data.schema:
                if "id" in col.roles:
                    rec.append(str(data.ids[i]) if data.ids is not None else str(i))
                elif "treatment" in col.roles:
                    rec.append(str(int(data.d[i])))
                elif "outcome" in col.roles:
                    rec.append(repr(float(data.y[i, out_idx[col.name]])))
                elif "auxiliary" in col.roles:
                    rec.append(repr(float(data.aux[col.name][i])))
                else:
                    rec.append(_format_number(data.x[i, cov_idx[col.name]], col.kind))
            writer.writerow(rec)


def standardized_difference(a, b) -> float:
    """Scale-free mean gap between two samples, in percentage points.

    ``|mean(a) - mean(b)| / sqrt((var(a) + var(b)) / 2) * 100`` with
    unbiased sample variances.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("standardized difference needs at least two "
                         "observations per sample")
    gap = abs(a.mean() - b.mean())
    pooled = 0.5 * (a.var(ddof=1) + b.var(ddof=1))
    if pooled == 0.0:
        if gap == 0.0:
            return 0.0
        raise DegenerateVarianceError("both samples have zero variance and "
                                      "different means")
    return float(gap / math.sqrt(pooled) * 100.0)


def is_large(std_diff: float) -> bool:
    return std_diff > LARGE_STD_DIFF


@dataclass
class DescriptiveReport:
    """Group means and standardized differences relative to a reference group.

    ``std_diffs`` only holds entries for non-reference groups; the
    reference group's own differences are zero by definition.
    """

    reference: object
    groups: list
    covariates: list[str]
    sizes: dict
    means: dict
    std_diffs: dict
    notes: list[str] = field(default_factory=list)

    def std_diff(self, group, covariate: str) -> float:
        if group == self.reference:
            return 0.0
        return float(self.std_diffs[group][self.covariates.index(covariate)])

    def n_entries(self) -> int:
        return sum(len(v) for v in self.std_diffs.values())

    def rows(self) -> list[dict]:
        out = []
        for g in self.groups:
            for j, cov in enumerate(self.covariates):
                sd = 0.0 if g == self.reference else float(self.std_diffs[g][j])
                mean = self.means[g][j] if self.sizes[g] else float("nan")
                out.append({"group": g, "covariate": cov, "n": self.sizes[g],
                            "mean": float(mean), "std_diff": sd,
                            "large": bool(is_large(sd)) if math.isfinite(sd) else False})
        return out

    def to_csv(self, path) -> None:
        write_table(path, self.rows(),
                    ["group", "covariate", "n", "mean", "std_diff", "large"])

    def to_json(self, path) -> None:
        payload = {"reference": _jsonable(self.reference),
                   "groups": [_jsonable(g) for g in self.groups],
                   "sizes": {str(k): int(v) for k, v in self.sizes.items()},
                   "rows": self.rows(), "notes": self.notes}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, allow_nan=True)
            fh.write("\n")


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


def _safe_std_diff(a, b, label, notes) -> float:
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    try:
        return standardized_difference(a, b)
    except DegenerateVarianceError:
        notes.append(f"{label}: degenerate variance, standardized difference undefined")
        return float("inf")


def compare_groups(x: np.ndarray, labels: np.ndarray, groups: Iterable,
                   reference, covariates: Sequence[str]) -> DescriptiveReport:
    """Means per group and standardized differences against ``reference``."""
    x = np.asarray(x, dtype=float)
    groups = list(groups)
    notes: list[str] = []
    sizes, means, diffs = {}, {}, {}
    ref_x = x[labels == reference]
    for g in groups:
        gx = x[labels == g]
        sizes[g] = int(gx.shape[0])
        means[g] = gx.mean(axis=0) if gx.shape[0] else np.full(x.shape[1], np.nan)
        if g == reference:
            continue
        diffs[g] = np.array([_safe_std_diff(gx[:, j], ref_x[:, j],
                                            f"group {g}, {covariates[j]}", notes)
                             for j in range(x.shape[1])])
    return DescriptiveReport(reference, groups, list(covariates), sizes, means,
                             diffs, notes)


def describe_by_treatment(data: Dataset, control: int = 0,
                          covariates: Sequence[str] | None = None) -> DescriptiveReport:
    """Covariate means per treatment arm and standardized differences to control."""
    counts = data.treatment_counts()
    if control < 0 or control >= data.n_treatments or counts[control] == 0:
        raise DataError(f"control label {control} not present in data")
    covariates = list(covariates) if covariates is not None else data.covariate_names
    cols = [data.index_of(c) for c in covariates]
    groups = []
    notes = []
    for g in range(data.n_treatments):
        if counts[g] == 0:
            msg = f"treatment group {g} is empty and omitted"
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
            continue
        groups.append(g)
    report = compare_groups(data.x[:, cols], data.d, groups, control, covariates)
    report.notes = notes + report.notes
    return report


def write_table(path, rows: list[dict], columns: Sequence[str]) -> None:
    """Write dict rows as CSV; floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)
