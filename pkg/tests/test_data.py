import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sccvfl import data


SCHEMA = [
    {"name": "amount", "kind": "numeric", "encoding": "standardize"},
    {"name": "job", "kind": "categorical", "encoding": "one-hot", "levels": ["a", "b", "c"]},
    {"name": "size", "kind": "ordinal", "encoding": "ordinal-codes", "levels": ["S", "M", "L"]},
    {"name": "age", "kind": "numeric", "role": "protected", "protected_rule": {"type": "threshold", "cut": 25}},
    {"name": "good", "kind": "categorical", "role": "label", "positive": ["yes"]},
]


def _write(tmp_path, rows, name="d.csv"):
    p = tmp_path / name
    p.write_text("amount,job,size,age,good\n" + "\n".join(rows) + "\n")
    return p


def test_load_encodes_columns(tmp_path):
    p = _write(tmp_path, ["100,a,S,20,yes", "200,c,L,40,no", ",b,M,30,yes"])
    ds = data.load_dataset(p, data.load_schema({"columns": SCHEMA}))
    assert ds.feature_names == ["amount", "job=a", "job=b", "job=c", "size"]
    assert ds.y.tolist() == [1, 0, 1] and ds.s.tolist() == [1, 0, 0]
    assert np.isnan(ds.X[2, 0]) and ds.X[1, 4] == 2.0
    assert ds.X[:, 1:4].sum(1).tolist() == [1, 1, 1]


def test_ingestion_errors(tmp_path):
    schema = data.load_schema({"columns": SCHEMA})
    with pytest.raises(data.IngestionError, match="row 1"):
        data.load_dataset(_write(tmp_path, ["1,a,S,20,yes", "x,a,S,20,yes"]), schema)
    with pytest.raises(data.IngestionError, match="unknown level"):
        data.load_dataset(_write(tmp_path, ["1,a,XL,20,yes"]), schema)
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(data.IngestionError):
        data.load_dataset(tmp_path / "empty.csv", schema)
    with pytest.raises(data.SchemaError):
        data.load_schema({"columns": SCHEMA[:-1]})


def test_preprocess_uses_train_statistics_only():
    schema = [data.ColumnSchema("a"), data.ColumnSchema("y", role="label", encoding=None)]
    tr = data.Dataset(np.array([[1.0], [3.0], [np.nan]]), np.array([0, 1, 0]), np.zeros(3, int), schema, ["a"])
    te = data.Dataset(np.array([[100.0]]), np.array([1]), np.zeros(1, int), schema, ["a"])
    st_ = data.fit_preprocess(tr)
    # median fill gives [1, 3, 2]: mean 2, population std sqrt(2/3)
    assert st_.median.tolist() == [2.0]
    out = data.apply_preprocess(st_, te)
    assert np.isclose(out.X[0, 0], (100.0 - 2.0) / np.sqrt(2.0 / 3.0))


def test_zero_variance_column_warns():
    schema = [data.ColumnSchema("a"), data.ColumnSchema("y", role="label", encoding=None)]
    tr = data.Dataset(np.ones((4, 1)), np.array([0, 1, 0, 1]), np.zeros(4, int), schema, ["a"])
    with pytest.warns(RuntimeWarning):
        st_ = data.fit_preprocess(tr)
    assert np.array_equal(data.apply_preprocess(st_, tr).X, np.zeros((4, 1)))


@given(st.integers(30, 300), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_iid_split_disjoint_complete(n, seed):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(3, int), np.ones(3, int), rng.integers(0, 2, n - 6)]
    s = rng.integers(0, 2, n)
    tr, va, te = data.split_indices(y, s, data.SplitSpec(seed=seed))
    allidx = np.concatenate([tr, va, te])
    assert len(np.unique(allidx)) == len(allidx) == n
    assert len(te) == int(np.floor(0.3 * n + 1e-9))
    assert len(va) == int(np.floor(0.2 * (n - len(te)) + 1e-9))


def test_split_is_stratified_and_seeded():
    y = np.r_[np.zeros(700, int), np.ones(300, int)]
    s = np.zeros(1000, int)
    tr, va, te = data.split_indices(y, s, data.SplitSpec(seed=1))
    assert y[te].mean() == pytest.approx(0.3)
    again = data.split_indices(y, s, data.SplitSpec(seed=1))
    assert all(np.array_equal(a, b) for a, b in zip((tr, va, te), again))


def test_noniid_shift_shares():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 1000)
    s = (rng.random(1000) < 0.4).astype(int)
    spec = data.SplitSpec(mode="noniid", shift={"group": 1, "train_share": 0.2, "test_share": 0.6}, seed=0)
    tr, va, te = data.split_indices(y, s, spec)
    assert s[te].mean() == pytest.approx(0.6, abs=0.01)
    assert s[np.r_[tr, va]].mean() == pytest.approx(0.2, abs=0.01)
    with pytest.raises(data.SplitError):
        data.SplitSpec(mode="noniid")


def test_layout_validation():
    lay = data.VerticalLayout((("A", (0, 1)), ("B", (2,))))
    lay.validate(3)
    with pytest.raises(data.LayoutError):
        lay.validate(4)
    with pytest.raises(data.LayoutError):
        data.VerticalLayout((("A", (0, 1)), ("B", (1, 2)))).validate(3)
    with pytest.raises(data.LayoutError):
        data.VerticalLayout((("A", (0, 1, 2)),)).validate(3)
    X = np.arange(6.0).reshape(2, 3)
    blocks = data.vertical_partition(X, lay)
    assert blocks[0].tolist() == [[0, 1], [3, 4]] and blocks[1].tolist() == [[2], [5]]


def test_builtin_german():
    ds = data.load_dataset("german")
    lay = data.builtin_layout("german", ds)
    assert ds.n == 1000 and lay.m >= 2
    assert set(np.unique(ds.s)) == {0, 1}
    assert not any(n.startswith("age") for n in ds.feature_names)


def test_export_split_roundtrip(tmp_path):
    schema = [data.ColumnSchema("a"), data.ColumnSchema("y", role="label", encoding=None)]
    ds = data.Dataset(np.array([[0.1], [1 / 3]]), np.array([0, 1]), np.array([1, 0]), schema, ["a"])
    data.export_split(ds, tmp_path / "tr.csv")
    side = json.loads((tmp_path / "tr.schema.json").read_text())
    assert side["feature_names"] == ["a"]
    text = (tmp_path / "tr.csv").read_text().splitlines()
    assert float(text[2].split(",")[0]) == 1 / 3
