"""Tabular ingestion, preprocessing, vertical partitioning and splitting.

Datasets are described by a list of :class:`ColumnSchema` entries. The
protected attribute and the label are pulled out of the feature matrix at
load time, so no downstream code can see them as features by accident.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import yaml

__all__ = [
    "ColumnSchema",
    "Dataset",
    "VerticalLayout",
    "SplitSpec",
    "PreprocessState",
    "SchemaError",
    "IngestionError",
    "LayoutError",
    "SplitError",
    "load_schema",
    "builtin_names",
    "builtin_layout",
    "load_dataset",
    "fit_preprocess",
    "apply_preprocess",
    "vertical_partition",
    "make_splits",
    "export_split",
]

KINDS = ("numeric", "categorical", "ordinal")
ENCODINGS = ("standardize", "one-hot", "ordinal-codes")


class SchemaError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str = "numeric"
    role: str = "feature"
    encoding: str | None = "standardize"
    levels: tuple[str, ...] | None = None
    protected_rule: dict | None = None
    positive: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ("feature", "protected", "label"):
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.role == "feature" and self.encoding not in ENCODINGS:
            raise SchemaError(f"column {self.name!r}: feature needs an encoding")

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        d = dict(d)
        if "role_hint" in d:
            d["role"] = d.pop("role_hint")
        for key in ("levels", "positive"):
            if d.get(key) is not None:
                d[key] = tuple(str(v) for v in d[key])
        if d.get("role", "feature") != "feature":
            d.setdefault("encoding", None)
        return cls(**d)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.encoding is not None:
            out["encoding"] = self.encoding
        if self.levels is not None:
            out["levels"] = list(self.levels)
        if self.protected_rule is not None:
            out["protected_rule"] = self.protected_rule
        if self.positive is not None:
            out["positive"] = list(self.positive)
        return out


def _check_schema(schema: Sequence[ColumnSchema]) -> None:
    labels = [c for c in schema if c.role == "label"]
    prot = [c for c in schema if c.role == "protected"]
    if len(labels) != 1:
        raise SchemaError(f"schema needs exactly one label column, found {len(labels)}")
    if len(prot) > 1:
        raise SchemaError("schema allows at most one protected column")
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate column names in schema")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    s: np.ndarray
    schema: list[ColumnSchema]
    feature_names: list[str]
    source_columns: list[str] = field(default_factory=list)
    n_groups: int = 2

    def __post_init__(self):
        n = self.X.shape[0]
        if len(self.y) != n or len(self.s) != n:
            raise ValueError("X, y and s must have the same number of rows")
        if self.X.shape[1] != len(self.feature_names):
            raise ValueError("feature_names does not match X width")
        if not self.source_columns:
            self.source_columns = list(self.feature_names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx], s=self.s[idx])


@dataclass(frozen=True)
class VerticalLayout:
    parties: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        if len(self.parties) < 1:
            raise LayoutError("layout needs at least one party")

    @property
    def m(self) -> int:
        return len(self.parties)

    @property
    def names(self) -> list[str]:
        return [p for p, _ in self.parties]

    def columns(self, p: int) -> np.ndarray:
        return np.asarray(self.parties[p][1], dtype=int)

    def order(self) -> np.ndarray:
        """Global column order obtained by concatenating party blocks."""
        return np.concatenate([self.columns(p) for p in range(self.m)])

    def validate(self, d: int, min_parties: int = 2) -> None:
        if self.m < min_parties:
            raise LayoutError(f"layout has {self.m} parties, need at least {min_parties}")
        seen: set[int] = set()
        for name, cols in self.parties:
            if len(cols) == 0:
                raise LayoutError(f"party {name!r} holds no columns")
            overlap = seen.intersection(cols)
            if overlap:
                raise LayoutError(f"party {name!r} overlaps on columns {sorted(overlap)}")
            seen.update(cols)
        if seen != set(range(d)):
            missing = sorted(set(range(d)) - seen)
            extra = sorted(seen - set(range(d)))
            raise LayoutError(f"layout incomplete: missing {missing}, out of range {extra}")

    @classmethod
    def from_source_groups(cls, groups: dict[str, Sequence[str]], ds: Dataset) -> "VerticalLayout":
        """Build a layout from raw column names, expanding one-hot blocks."""
        parties = []
        for party, srcs in groups.items():
            cols = [j for j, src in enumerate(ds.source_columns) if src in set(srcs)]
            parties.append((party, tuple(cols)))
        return cls(tuple(parties))


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "iid"
    train_frac: float = 0.70
    val_frac_of_train: float = 0.20
    shift: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "noniid"):
            raise SplitError(f"unknown split mode {self.mode!r}")
        for f in (self.train_frac, self.val_frac_of_train):
            if not 0.0 < f < 1.0:
                raise SplitError("split fractions must lie in (0, 1)")
        if self.mode == "noniid" and not self.shift:
            raise SplitError("noniid split needs a shift definition")


# ---------------------------------------------------------------- schemas

def builtin_names() -> list[str]:
    return ["german", "compas", "heart"]


def _builtin_meta(name: str) -> dict:
    if name not in builtin_names():
        raise SchemaError(f"unknown built-in dataset {name!r}")
    text = resources.files("sccvfl.datasets").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def load_schema(source: str | Path | dict) -> list[ColumnSchema]:
    """Schema from a built-in name, a YAML file, or an already parsed dict."""
    if isinstance(source, dict):
        meta = source
    elif str(source) in builtin_names():
        meta = _builtin_meta(str(source))
    else:
        meta = yaml.safe_load(Path(source).read_text())
    cols = meta["columns"] if isinstance(meta, dict) else meta
    schema = [ColumnSchema.from_dict(c) for c in cols]
    _check_schema(schema)
    return schema


def builtin_layout(name: str, ds: Dataset) -> VerticalLayout:
    meta = _builtin_meta(name)
    layout = VerticalLayout.from_source_groups(meta["layout"], ds)
    layout.validate(ds.d)
    return layout


# --------------------------------------------------------------- loading

def _protected_groups(raw: pd.Series, rule: dict | None, col: str) -> tuple[np.ndarray, int]:
    if rule is None:
        codes, uniques = pd.factorize(raw.astype(str), sort=True)
        return codes.astype(int), len(uniques)
    kind = rule.get("type", "threshold")
    if kind == "threshold":
        vals = pd.to_numeric(raw, errors="coerce")
        if vals.isna().any():
            bad = int(np.flatnonzero(vals.isna().to_numpy())[0])
            raise IngestionError(f"row {bad}, column {col!r}: cannot parse {raw.iloc[bad]!r}")
        below = vals.to_numpy() < float(rule["cut"])
        s = np.where(below, int(rule.get("below", 1)), int(rule.get("above", 0)))
        return s.astype(int), 2
    if kind == "category":
        mapping = {str(k): int(v) for k, v in rule["groups"].items()}
        default = int(rule.get("default", 0))
        s = raw.astype(str).map(lambda v: mapping.get(v, default)).to_numpy()
        return s.astype(int), max(max(mapping.values()), default) + 1
    raise SchemaError(f"unknown protected rule type {kind!r}")


def _numeric(raw: pd.Series, col: str) -> np.ndarray:
    vals = pd.to_numeric(raw, errors="coerce")
    bad = vals.isna() & raw.notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(f"row {row}, column {col!r}: cannot parse {raw.iloc[row]!r} as a number")
    return vals.to_numpy(dtype=float)


def load_dataset(source: str | Path, schema: Sequence[ColumnSchema] | None = None) -> Dataset:
    """Read a CSV (or a built-in name) and encode it per ``schema``.

    Numeric columns are left in raw units with NaN for missing cells; call
    :func:`fit_preprocess` on the training split to impute and scale.
    """
    if schema is None:
        if str(source) not in builtin_names():
            raise SchemaError("a schema is required for non built-in sources")
        schema = load_schema(str(source))
    schema = list(schema)
    _check_schema(schema)

    path: Path | Any
    if str(source) in builtin_names():
        meta = _builtin_meta(str(source))
        if not meta.get("file"):
            raise IngestionError(
                f"the {source!r} data file is not bundled; pass a CSV path with the {source!r} schema")
        path = resources.files("sccvfl.datasets").joinpath(meta["file"])
    else:
        path = Path(source)
        if not path.exists():
            raise IngestionError(f"no such file: {path}")
    try:
        with path.open("r", encoding="utf-8") as fh:
            frame = pd.read_csv(fh, dtype=str, keep_default_na=False, na_values=["", "?", "NA"])
    except pd.errors.EmptyDataError:
        raise IngestionError("empty file: zero rows") from None
    if len(frame) == 0:
        raise IngestionError("empty file: zero rows")

    missing = [c.name for c in schema if c.name not in frame.columns]
    if missing:
        raise SchemaError(f"columns missing from data: {missing}")

    blocks: list[np.ndarray] = []
    names: list[str] = []
    sources: list[str] = []
    y = s = None
    n_groups = 1
    for col in schema:
        raw = frame[col.name]
        if col.role == "label":
            if col.positive is None:
                codes, _ = pd.factorize(raw.astype(str), sort=True)
                y = codes.astype(int)
            else:
                y = raw.astype(str).isin(set(col.positive)).to_numpy().astype(int)
            continue
        if col.role == "protected":
            s, n_groups = _protected_groups(raw, col.protected_rule, col.name)
            continue
        if col.encoding == "standardize":
            blocks.append(_numeric(raw, col.name)[:, None])
            names.append(col.name)
            sources.append(col.name)
        elif col.encoding == "ordinal-codes":
            levels = col.levels or tuple(sorted(raw.dropna().astype(str).unique()))
            lookup = {lv: i for i, lv in enumerate(levels)}
            vals = np.full(len(raw), np.nan)
            for i, v in enumerate(raw):
                if pd.isna(v):
                    continue
                if str(v) not in lookup:
                    raise IngestionError(f"row {i}, column {col.name!r}: unknown level {v!r}")
                vals[i] = lookup[str(v)]
            blocks.append(vals[:, None])
            names.append(col.name)
            sources.append(col.name)
        else:
            levels = col.levels or tuple(sorted(raw.dropna().astype(str).unique()))
            onehot = np.zeros((len(raw), len(levels)))
            for k, lv in enumerate(levels):
                onehot[:, k] = (raw.astype(str) == lv).to_numpy()
            blocks.append(onehot)
            names.extend(f"{col.name}={lv}" for lv in levels)
            sources.extend([col.name] * len(levels))

    if s is None:
        s = np.zeros(len(frame), dtype=int)
    X = np.hstack(blocks) if blocks else np.zeros((len(frame), 0))
    return Dataset(X=X, y=np.asarray(y), s=np.asarray(s), schema=schema,
                   feature_names=names, source_columns=sources, n_groups=n_groups)


# ---------------------------------------------------------- preprocessing

@dataclass
class PreprocessState:
    scale_cols: np.ndarray
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    warnings: list[str] = field(default_factory=list)


def _scaled_columns(ds: Dataset) -> np.ndarray:
    enc = {c.name: c.encoding for c in ds.schema}
    return np.array([j for j, src in enumerate(ds.source_columns)
                     if enc.get(src) in ("standardize", "ordinal-codes")], dtype=int)


def fit_preprocess(train: Dataset) -> PreprocessState:
    """Median imputation and z-scoring, fitted on the training split only.

    Standard deviations use the population convention (ddof=0).
    """
    cols = _scaled_columns(train)
    sub = train.X[:, cols]
    med = np.nanmedian(sub, axis=0) if sub.size else np.zeros(0)
    med = np.where(np.isnan(med), 0.0, med)
    filled = np.where(np.isnan(sub), med, sub)
    mean = filled.mean(axis=0) if sub.size else np.zeros(0)
    std = filled.std(axis=0) if sub.size else np.zeros(0)
    notes = []
    for j, sd in zip(cols, std):
        if sd == 0.0:
            msg = f"column {train.feature_names[j]!r} has zero variance; emitted as zeros"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return PreprocessState(cols, med, mean, std, notes)


def apply_preprocess(state: PreprocessState, ds: Dataset) -> Dataset:
    X = ds.X.copy()
    sub = X[:, state.scale_cols]
    sub = np.where(np.isnan(sub), state.median, sub)
    safe = np.where(state.std == 0.0, 1.0, state.std)
    sub = np.where(state.std == 0.0, 0.0, (sub - state.mean) / safe)
    X[:, state.scale_cols] = sub
    X = np.where(np.isnan(X), 0.0, X)
    return replace(ds, X=X)


# ------------------------------------------------------------ partitioning

def vertical_partition(ds: Dataset | np.ndarray, layout: VerticalLayout) -> list[np.ndarray]:
    X = ds.X if isinstance(ds, Dataset) else ds
    layout.validate(X.shape[1], min_parties=1)
    return [X[:, layout.columns(p)] for p in range(layout.m)]


# ------------------------------------------------------------------ splits

def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` across strata."""
    if counts.sum() == 0:
        return np.zeros_like(counts)
    exact = counts * total / counts.sum()
    base = np.floor(exact).astype(int)
    short = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:short]] += 1
    return np.minimum(base, counts)


def _stratified_take(idx: np.ndarray, strata: np.ndarray, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
    keys = np.unique(strata)
    pools = [rng.permutation(idx[strata == key]) for key in keys]
    quota = _allocate(np.array([len(p) for p in pools]), k)
    taken = [p[:q] for p, q in zip(pools, quota)]
    rest = [p[q:] for p, q in zip(pools, quota)]
    return np.sort(np.concatenate(taken)), np.sort(np.concatenate(rest))


def make_splits(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test split; see :func:`split_indices` for the index form."""
    tr, va, te = split_indices(ds.y, ds.s, spec)
    return ds.take(tr), ds.take(va), ds.take(te)


def split_indices(y: np.ndarray, s: np.ndarray, spec: SplitSpec):
    n = len(y)
    rng = np.random.default_rng(spec.seed)
    n_test = int(math.floor((1.0 - spec.train_frac) * n + 1e-9))
    idx = np.arange(n)
    if spec.mode == "iid":
        for label in np.unique(y):
            if (y == label).sum() < 3:
                raise SplitError(f"class {label} has too few rows to stratify")
        test, rest = _stratified_take(idx, y, n_test, rng)
    else:
        test, rest = _shifted_test(idx, y, s, n_test, spec.shift, rng)
    n_val = int(math.floor(spec.val_frac_of_train * len(rest) + 1e-9))
    strata = y[rest] * (int(s.max()) + 1) + s[rest] if spec.mode == "noniid" else y[rest]
    val, train = _stratified_take(rest, strata, n_val, rng)
    return train, val, test


def _shifted_test(idx, y, s, n_test, shift, rng):
    """Per-group quotas for test and train, stratified on (y, s) inside each.

    ``shift`` = {group, train_share, test_share}. Rows that cannot be placed
    without breaking the train share are left out of every split.
    """
    g = int(shift["group"])
    p_te = float(shift["test_share"])
    p_tr = float(shift["train_share"])
    in_g = s == g
    n_g_test = int(round(p_te * n_test))
    if n_g_test > in_g.sum() or n_test - n_g_test > (~in_g).sum():
        raise SplitError("shift asks for more test rows of a group than exist")
    t_in, r_in = _stratified_take(idx[in_g], y[in_g], n_g_test, rng)
    t_out, r_out = _stratified_take(idx[~in_g], y[~in_g], n_test - n_g_test, rng)
    if p_tr <= 0.0 or p_tr >= 1.0:
        raise SplitError("train_share must lie strictly between 0 and 1; an empty group is not allowed")
    size = int(min(len(r_in) / p_tr, len(r_out) / (1.0 - p_tr)))
    keep_in = int(round(p_tr * size))
    keep_out = size - keep_in
    if keep_in == 0 or keep_out == 0:
        raise SplitError("shift leaves a protected group empty in train")
    k_in, _ = _stratified_take(r_in, y[r_in], keep_in, rng)
    k_out, _ = _stratified_take(r_out, y[r_out], keep_out, rng)
    return np.sort(np.concatenate([t_in, t_out])), np.sort(np.concatenate([k_in, k_out]))


def export_split(ds: Dataset, path: str | Path) -> None:
    """Write a preprocessed split as CSV plus a JSON schema sidecar."""
    path = Path(path)
    frame = pd.DataFrame(ds.X, columns=ds.feature_names)
    frame["__label__"] = ds.y
    frame["__group__"] = ds.s
    frame.to_csv(path, index=False, float_format="%.17g")
    sidecar = {"feature_names": ds.feature_names, "source_columns": ds.source_columns,
               "n_groups": ds.n_groups, "schema": [c.to_dict() for c in ds.schema]}
    path.with_suffix(".schema.json").write_text(json.dumps(sidecar, indent=2))
