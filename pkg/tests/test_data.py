import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doseshrink.data import (ColumnSchema, DataError, build_dataset, dummy_code, load_dataset, standardize,
                             write_summary)

from conftest import example_frame


def _write(tmp_path, df, name="d.csv"):
    p = tmp_path / name
    df.to_csv(p, index=False)
    return p


def test_four_row_standardization(tmp_path):
    p = _write(tmp_path, pd.DataFrame({"dose": [0, 0, 50, 50], "response": [1.0, 2, 3, 4], "x": [1.0, 2, 3, 4]}))
    d = load_dataset(p)
    np.testing.assert_allclose(d.covariates[:, 0], [-1.1619, -0.3873, 0.3873, 1.1619], atol=1e-4)
    assert d.standardization.columns[0].sd == pytest.approx(1.2910, abs=1e-4)


def test_all_placebo_rejected(tmp_path):
    p = _write(tmp_path, pd.DataFrame({"dose": [0, 0, 0], "response": [1.0, 2, 3]}))
    with pytest.raises(DataError, match="no active dose"):
        load_dataset(p)


def test_three_level_categorical_gives_two_dummies_in_one_group():
    d = build_dataset([0, 10, 20, 0], [1.0, 2, 3, 4], categorical={"g": ["b", "a", "c", "a"]})
    assert d.p == 2 and d.k == 1
    assert d.column_names == ("g[b]", "g[c]")
    assert np.all(d.group_index == 0)
    np.testing.assert_array_equal(d.covariates, [[1, 0], [0, 0], [0, 1], [0, 0]])


def test_standardize_examples():
    z, _ = standardize([1, 2, 3])
    np.testing.assert_allclose(z, [-1, 0, 1])
    with pytest.raises(DataError, match="zero sd"):
        standardize([5, 5, 5])


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=50))
@settings(max_examples=60, deadline=None)
def test_standardize_round_trip(values):
    x = np.asarray(values)
    if np.ptp(x) < 1e-3:
        return
    z, rec = standardize(x)
    assert abs(z.mean()) < 1e-10
    assert z.std(ddof=1) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(z * rec.sd + rec.mean, x, atol=1e-12 * max(1.0, np.abs(x).max()))


@pytest.mark.parametrize("missing,msg", [("response", "missing column"), (None, "NaN"), ("nan_dose", "NaN")])
def test_load_errors(tmp_path, missing, msg):
    df = pd.DataFrame({"dose": [0.0, 10, 20], "response": [1.0, 2, 3], "x": [1.0, 2, 4]})
    if missing == "response":
        df = df.drop(columns="response")
    elif missing is None:
        df.loc[1, "x"] = np.nan
    else:
        df.loc[0, "dose"] = np.nan
    with pytest.raises(DataError, match=msg):
        load_dataset(_write(tmp_path, df))


def test_non_numeric_dose(tmp_path):
    df = pd.DataFrame({"dose": ["0", "low", "high"], "response": [1.0, 2, 3]})
    with pytest.raises(DataError, match="numeric"):
        load_dataset(_write(tmp_path, df))


def test_missing_file_named(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        load_dataset(tmp_path / "nope.csv")


def test_example_shaped_dataset(tmp_path):
    df = example_frame()
    schema = ColumnSchema("dose", "response", ("c1", "c2", "c3", "c4"), ("f1", "f2", "f3", "f4", "f5", "f6"))
    d = load_dataset(_write(tmp_path, df), schema)
    assert (d.n, d.k, d.p) == (270, 10, 12)
    assert d.dose_levels[0] == 0
    # groups partition the columns
    cols = np.concatenate(d.groups())
    assert sorted(cols.tolist()) == list(range(d.p))
    assert sum(len(g) for g in d.groups()) == d.p
    # continuous columns standardized, dummies untouched
    for j, rec in enumerate(d.standardization.columns):
        if rec.kind == "continuous":
            assert abs(d.covariates[:, j].mean()) < 1e-10
            assert d.covariates[:, j].std(ddof=1) == pytest.approx(1, abs=1e-10)
        else:
            assert set(np.unique(d.covariates[:, j])) <= {0.0, 1.0}
    # dummies of one factor sum to at most 1
    for g in d.groups():
        if len(g) > 1:
            assert d.covariates[:, g].sum(axis=1).max() <= 1
    # raw values recovered
    np.testing.assert_allclose(d.standardization.inverse(d.covariates)[:, 0], df.c1, atol=1e-10)
    out = tmp_path / "summary.json"
    write_summary(d, out)
    s = json.loads(out.read_text())
    assert s["n"] == 270 and s["groups"]["f1"] == ["f1[b]", "f1[c]"]


def test_dataset_is_immutable(small_data):
    with pytest.raises(ValueError):
        small_data.response[0] = 1.0


def test_dummy_reference_is_lexicographic():
    _, names, levels = dummy_code(["z", "m", "a"], "f")
    assert levels == ["a", "m", "z"] and names == ["f[m]", "f[z]"]


def test_fingerprint_changes_with_content(small_data):
    other = build_dataset(small_data.dose, small_data.response + 1e-9, {"x": np.arange(small_data.n)})
    assert small_data.fingerprint() != other.fingerprint()
    assert small_data.fingerprint() == small_data.fingerprint()
