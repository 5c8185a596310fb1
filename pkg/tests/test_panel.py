import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from railpanel.errors import RailpanelError
from railpanel.panel import (PanelDataset, complete_cases, event_time, read_panel_csv,
                             validate_panel, write_panel_csv)
from conftest import make_panel, random_panel

NAN = np.nan


def test_non_absorbing_treatment_is_an_error():
    ds = make_panel([("u1", 1850, NAN, 1.0), ("u1", 1860, 1860, 2.0),
                     ("u1", 1880, NAN, 3.0), ("u1", 1901, NAN, 4.0),
                     ("u2", 1850, NAN, 1.0), ("u2", 1860, NAN, 1.0),
                     ("u2", 1880, NAN, 1.0), ("u2", 1901, NAN, 1.0)])
    report = validate_panel(ds)
    assert "NON_ABSORBING" in report.codes()
    bad = [e for e in report.errors if e[0] == "NON_ABSORBING"]
    assert bad[0][1:3] == ("u1", 1880)


def test_clean_panel_has_no_errors():
    ds = make_panel([("u1", 1850, NAN, 1.0), ("u1", 1860, NAN, 2.0),
                     ("u2", 1850, 1860, 1.0), ("u2", 1860, 1860, 3.0)])
    report = validate_panel(ds)
    assert report.errors == []
    assert report.ok


def test_duplicate_row():
    ds = make_panel([("u1", 1850, NAN, 1.0), ("u1", 1850, NAN, 2.0),
                     ("u2", 1850, NAN, 1.0)])
    assert "DUPLICATE_ROW" in validate_panel(ds).codes()


def test_unordered_periods_and_missing_coords():
    df = pd.DataFrame({"unit_id": ["a", "a"], "year": [1860, 1850], "treatment_year": [NAN, NAN],
                       "lat": [NAN, NAN], "lon": [10.0, 10.0], "y": [1.0, 2.0]})
    ds = PanelDataset(df, ("y",))
    assert "PERIODS_UNORDERED" in validate_panel(ds).codes()
    assert "MISSING_COORDS" in validate_panel(ds).codes("warnings")
    assert "MISSING_COORDS" in validate_panel(ds, require_coords=True).codes()


def test_time_varying_covariate_rejected():
    df = pd.DataFrame({"unit_id": ["a", "a"], "year": [1850, 1860], "treatment_year": [NAN, NAN],
                       "lat": [56.0, 56.0], "lon": [10.0, 10.0], "y": [1.0, 2.0], "x": [1.0, 2.0]})
    assert "COVARIATE_VARIES" in validate_panel(PanelDataset(df, ("y",), ("x",))).codes()


def test_complete_cases_table3_counts(rng):
    # 1589 units x 4 periods, 9 units lose one cell -> 1580 x 4 = 6320 rows
    periods = [1850, 1860, 1880, 1901]
    n = 1589
    df = pd.DataFrame({
        "unit_id": np.repeat([f"p{i:04d}" for i in range(n)], 4),
        "year": np.tile(periods, n), "treatment_year": NAN, "lat": 56.0, "lon": 10.0,
        "y": rng.normal(size=4 * n),
    })
    holes = rng.choice(n, 9, replace=False) * 4 + rng.integers(0, 4, 9)
    df.loc[holes, "y"] = NAN
    ds = PanelDataset(df, ("y",))
    cc = complete_cases(ds, "y")
    assert cc.n_units == 1580
    assert len(cc) == 6320
    assert cc.periods == periods


def test_complete_cases_identity_and_empty():
    ds = make_panel([("u1", 1850, NAN, 1.0), ("u1", 1860, NAN, 2.0)])
    assert complete_cases(ds, "y") is ds
    ds = make_panel([("u1", 1850, NAN, 1.0), ("u1", 1860, NAN, NAN),
                     ("u2", 1850, NAN, 1.0), ("u2", 1860, NAN, NAN)])
    with pytest.raises(RailpanelError) as exc:
        complete_cases(ds, "y")
    assert exc.value.code == "EMPTY_RESULT"


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), missing=st.floats(0.0, 0.3))
def test_complete_cases_idempotent(seed, missing):
    ds = random_panel(np.random.default_rng(seed), 12, [1850, 1860, 1880], missing=missing)
    try:
        once = complete_cases(ds, "y")
    except RailpanelError:
        return
    twice = complete_cases(once, "y")
    pd.testing.assert_frame_equal(once.frame, twice.frame)


def test_event_time():
    ds = make_panel([("u1", 1850, 1860, 1.0), ("u1", 1860, 1860, 1.0), ("u1", 1880, 1860, 1.0),
                     ("u2", 1850, NAN, 1.0), ("u2", 1860, NAN, 1.0), ("u2", 1880, NAN, 1.0)])
    assert event_time(ds, "u1", 1880) == 20
    assert event_time(ds, "u1", 1850) == -10
    assert event_time(ds, "u1", 1860) == 0
    assert event_time(ds, "u2", 1880) is None
    with pytest.raises(RailpanelError) as exc:
        event_time(ds, "nope", 1850)
    assert exc.value.code == "UNKNOWN_UNIT"


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_treatment_indicator_absorbing(seed):
    ds = random_panel(np.random.default_rng(seed), 10, [1850, 1860, 1880, 1901])
    d = ds.wide("treatment_year")
    D = ds.treatment_indicator()
    wide = np.zeros_like(d)
    wide[ds.unit_codes, ds.period_codes] = D
    assert np.all(np.diff(wide, axis=1) >= 0)
    for u in ds.units:
        first = ds.schedule.first_treated[u]
        if first is not None:
            assert event_time(ds, u, first) == 0


def test_cohort_maps_connection_year_to_next_census():
    ds = make_panel([("u1", 1850, 1865, 1.0), ("u1", 1860, 1865, 1.0), ("u1", 1880, 1865, 1.0),
                     ("u2", 1850, 1950, 1.0), ("u2", 1860, 1950, 1.0), ("u2", 1880, 1950, 1.0)])
    cohorts = ds.cohorts()
    assert cohorts[0] == 1880
    assert np.isnan(cohorts[1])  # connected after the window


def test_csv_round_trip(tmp_path, rng):
    ds = random_panel(rng, 8, [1850, 1860, 1880], missing=0.2)
    path = tmp_path / "panel.csv"
    write_panel_csv(ds, path)
    back = read_panel_csv(path, covariates=["x1"])
    assert back.outcomes == ("y",)
    cols = list(back.frame.columns)
    pd.testing.assert_frame_equal(back.frame[cols], ds.frame[cols], check_exact=True)
    write_panel_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_csv_schema_and_parse_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("unit_id,year,lat,lon,y\na,1850,56,10,1\n")
    with pytest.raises(RailpanelError) as exc:
        read_panel_csv(p)
    assert exc.value.code == "SCHEMA_ERROR"
    p.write_text("unit_id,year,treatment_year,lat,lon,y\na,1850,,56,10,1\na,1860,,56,10,oops\n")
    with pytest.raises(RailpanelError) as exc:
        read_panel_csv(p)
    assert exc.value.code == "PARSE_ERROR"
    assert exc.value.context["line"] == 3
