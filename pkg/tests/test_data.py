
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from dyndml.data import (PanelDataset, PanelSchema, SingleSeries, load_panel_csv, load_panel_json,
                         load_series_csv, split, write_panel_csv, write_panel_json, write_series_csv)
from dyndml.errors import ParseError, SchemaError, ShapeError, ValidationError


def make_panel(n=5, m=3, d=2, p=4, seed=0, exo=False):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, m))
    return PanelDataset(states=rng.standard_normal((n, m, p)), treatments=rng.standard_normal((n, m, d)),
                        final_outcome=Y[:, -1], per_period_outcomes=Y,
                        exo_features=rng.standard_normal((n, 1)) if exo else None)


def test_shapes_and_accessors():
    pan = make_panel()
    assert (pan.n, pan.m, pan.d, pan.p) == (5, 3, 2, 4)
    np.testing.assert_array_equal(pan.T(0), np.zeros((5, 2)))
    np.testing.assert_array_equal(pan.X(2), pan.states[:, 1])
    with pytest.raises(ValueError):
        pan.states[0, 0, 0] = 1.0


def test_rejects_misaligned_rows():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        PanelDataset(states=rng.standard_normal((5, 3, 2)), treatments=rng.standard_normal((4, 3, 1)),
                     final_outcome=rng.standard_normal(5))


def test_rejects_nonfinite():
    pan = make_panel()
    states = pan.states.copy()
    states[1, 2, 0] = np.nan
    with pytest.raises(ValidationError):
        PanelDataset(states=states, treatments=pan.treatments, final_outcome=pan.final_outcome)


def test_last_period_outcome_must_match_final():
    pan = make_panel()
    Y = pan.per_period_outcomes.copy()
    Y[0, -1] += 1
    with pytest.raises(ValidationError):
        PanelDataset(states=pan.states, treatments=pan.treatments, final_outcome=pan.final_outcome,
                     per_period_outcomes=Y)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 200), folds=st.integers(2, 5), seed=st.integers(0, 2**31))
def test_split_is_balanced_partition(n, folds, seed):
    if folds > n:
        with pytest.raises(ValidationError):
            split(n, seed, folds)
        return
    sp = split(n, seed, folds)
    sizes = sp.sizes()
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
    for k in range(folds):
        assert set(sp.train_index(k)).isdisjoint(sp.test_index(k))
    np.testing.assert_array_equal(sp.folds, split(n, seed, folds).folds)


def test_split_of_one_unit_rejected():
    with pytest.raises(ValidationError):
        split(1, 0)


def test_csv_round_trip(tmp_path):
    pan = make_panel(exo=True)
    path = tmp_path / "panel.csv"
    write_panel_csv(pan, path)
    back = load_panel_csv(path)
    np.testing.assert_array_equal(back.states, pan.states)
    np.testing.assert_array_equal(back.treatments, pan.treatments)
    np.testing.assert_array_equal(back.final_outcome, pan.final_outcome)
    np.testing.assert_array_equal(back.exo_features, pan.exo_features)


def test_json_round_trip(tmp_path):
    pan = make_panel()
    path = tmp_path / "panel.json"
    write_panel_json(pan, path)
    back = load_panel_json(path)
    np.testing.assert_array_equal(back.states, pan.states)


def test_missing_column_named(tmp_path):
    pan = make_panel()
    path = tmp_path / "panel.csv"
    write_panel_csv(pan, path)
    df = pd.read_csv(path)
    schema = PanelSchema(unit="unit", period="period", y="y", treatments=["t_0", "t_missing"], states=["x_0"])
    with pytest.raises(SchemaError, match="t_missing"):
        from dyndml.data import _panel_from_frame
        _panel_from_frame(df, schema)


def test_non_numeric_cell_reports_location(tmp_path):
    pan = make_panel()
    path = tmp_path / "panel.csv"
    write_panel_csv(pan, path)
    df = pd.read_csv(path)
    df = df.astype({"x_1": object})
    df.loc[3, "x_1"] = "oops"
    df.to_csv(path, index=False)
    with pytest.raises(ParseError, match=r"row 3 column 'x_1'"):
        load_panel_csv(path)


def test_ragged_unit_rejected(tmp_path):
    pan = make_panel()
    path = tmp_path / "panel.csv"
    write_panel_csv(pan, path)
    df = pd.read_csv(path)
    df = df.drop(index=df.index[(df.unit == df.unit.iloc[0]) & (df.period == 2)])
    df.to_csv(path, index=False)
    with pytest.raises(ShapeError, match="rows, expected m=3"):
        load_panel_csv(path)


def test_series_blocks_and_truncation(tmp_path):
    rng = np.random.default_rng(0)
    L = 3 * 9 + 2
    with pytest.warns(UserWarning, match="even block count"):
        ser = SingleSeries(rng.standard_normal((L, 2)), rng.standard_normal(L), rng.standard_normal(L), 3)
    assert ser.n_blocks == 8 and ser.length == 24
    pan = ser.as_blocks()
    assert pan.n == 8 and pan.m == 3
    np.testing.assert_array_equal(pan.final_outcome, ser.outcomes[2::3])
    path = tmp_path / "series.csv"
    write_series_csv(ser, path)
    back = load_series_csv(path, 3)
    np.testing.assert_array_equal(back.outcomes, ser.outcomes)


def test_series_too_short():
    with pytest.raises(ShapeError):
        SingleSeries(np.zeros((9, 1)), np.zeros(9), np.zeros(9), 3)
