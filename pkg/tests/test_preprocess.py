"""
Tests for season extraction, missing-data rules, thresholds and runs declustering.
"""
import itertools
import math

import numpy as np
import pytest

from grid2point.errors import ExcessiveMissingError, InsufficientDataError, PreconditionError
from grid2point.preprocess import (
    DailySeries,
    all_exceedances,
    build_exceedances,
    decluster_runs,
    expected_season_days,
    extract_season,
    missing_fraction,
    observed_period,
    passes_missing_filter,
    percentile_threshold,
    season_years,
)
from grid2point.synth import season_dates


def make_series(values, start="1950-01-01", dates=None, site_id="S1"):
    values = np.asarray(values, dtype=float)
    if dates is None:
        dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + values.size)
    return DailySeries(site_id=site_id, lat=40.0, lon=-90.0, dates=dates, values=values)


def test_series_validation():
    with pytest.raises(PreconditionError):
        make_series([1.0, -2.0])
    with pytest.raises(PreconditionError):
        DailySeries("S1", 0, 0, np.array(["1950-01-02", "1950-01-01"], dtype="datetime64[D]"), [1.0, 2.0])


def test_december_belongs_to_next_winter():
    dates = np.array(["1949-12-15", "1950-03-01", "1999-02-28", "1999-12-20"], dtype="datetime64[D]")
    s = DailySeries("S1", 40, -90, dates, [1.0, 2.0, 3.0, 4.0])
    winter = extract_season(s, "DJF", (1950, 1999))
    assert winter.dates.tolist() == np.array(["1949-12-15", "1999-02-28"], dtype="datetime64[D]").tolist()
    assert winter.season == "DJF"
    assert season_years(dates, "DJF").tolist() == [1950, 1950, 1999, 2000]


def test_extract_season_rejects_unknown_season():
    with pytest.raises(PreconditionError):
        extract_season(make_series([1.0]), "WET", (1950, 1950))


def test_expected_season_days_counts_leap_years():
    # Twelve leap Februaries between 1952 and 1996
    assert expected_season_days("DJF", (1950, 1999)) == 50 * 90 + 12
    assert expected_season_days("JJA", (1950, 1999)) == 50 * 92
    assert expected_season_days("SON", (1950, 1950)) == 91


def test_missing_fraction_boundary():
    """A tenth of the season missing still passes; a fifth does not."""
    dates = season_dates("JJA", (1950, 1999))
    assert dates.size == 4600
    values = np.ones(dates.size)
    s = DailySeries("S1", 40, -90, dates, values)
    assert missing_fraction(s, "JJA", (1950, 1999)) == 0.0

    values[::10] = np.nan
    s = DailySeries("S1", 40, -90, dates, values)
    frac = missing_fraction(s, "JJA", (1950, 1999))
    assert frac == pytest.approx(0.10)
    assert passes_missing_filter(frac, 0.1)

    values[1::10] = np.nan
    s = DailySeries("S1", 40, -90, dates, values)
    frac = missing_fraction(s, "JJA", (1950, 1999))
    assert frac == pytest.approx(0.20)
    assert not passes_missing_filter(frac, 0.1)


def test_absent_days_count_as_missing():
    dates = season_dates("JJA", (1950, 1951))
    s = DailySeries("S1", 40, -90, dates[:92], np.ones(92))
    assert missing_fraction(s, "JJA", (1950, 1951)) == pytest.approx(0.5)


@pytest.mark.parametrize("p, expected", [(0.95, 95.0), (0.97, 97.0)])
def test_percentile_threshold_order_statistic(p, expected):
    assert percentile_threshold(make_series(np.arange(1, 101)), p) == expected


def test_percentile_threshold_includes_dry_days():
    values = [0.0] * 95 + [5, 6, 7, 8, 9]
    assert percentile_threshold(make_series(values), 0.95) == 0.0


def test_percentile_threshold_ignores_missing_and_needs_enough_days():
    values = np.concatenate([np.arange(1, 101, dtype=float), [np.nan] * 10])
    assert percentile_threshold(make_series(values), 0.95) == 95.0
    with pytest.raises(InsufficientDataError):
        percentile_threshold(make_series(np.arange(1, 20)), 0.95)


def test_decluster_examples():
    assert decluster_runs(make_series([3, 7, 8, 2, 9]), 5).tolist() == [8.0, 9.0]
    assert decluster_runs(make_series([7, np.nan, 8]), 5).tolist() == [7.0, 8.0]
    assert decluster_runs(make_series([1, 2, 3]), 5).size == 0


def test_decluster_breaks_runs_at_date_gaps():
    dates = np.array(["1950-01-01", "1950-01-02", "1950-01-05"], dtype="datetime64[D]")
    s = DailySeries("S1", 40, -90, dates, [7.0, 8.0, 9.0])
    assert decluster_runs(s, 5).tolist() == [8.0, 9.0]


def test_winter_run_crosses_new_year():
    dates = np.array(["1950-12-31", "1951-01-01"], dtype="datetime64[D]")
    s = DailySeries("S1", 40, -90, dates, [7.0, 9.0], season="DJF")
    assert decluster_runs(s, 5).tolist() == [9.0]


def brute_force_cluster_maxima(values, u):
    peaks, current = [], None
    for v in values:
        if v > u:
            current = v if current is None else max(current, v)
        elif current is not None:
            peaks.append(current)
            current = None
    if current is not None:
        peaks.append(current)
    return peaks


def test_decluster_matches_brute_force_on_all_patterns():
    """Every above/below pattern of length 12 with varying peak heights."""
    heights = np.arange(1, 13, dtype=float)
    for pattern in itertools.product((False, True), repeat=12):
        values = np.where(pattern, 10.0 + heights, 1.0)
        expected = brute_force_cluster_maxima(values.tolist(), 5.0)
        assert decluster_runs(make_series(values), 5.0).tolist() == expected


def test_all_exceedances_keeps_every_day():
    assert all_exceedances(make_series([3, 7, 8, 2, 9]), 5).tolist() == [7.0, 8.0, 9.0]


def test_observed_period():
    dates = season_dates("DJF", (1950, 1999))
    s = DailySeries("S1", 40, -90, dates, np.ones(dates.size), season="DJF")
    assert observed_period(s, "DJF") == pytest.approx(dates.size / 90.25)
    assert observed_period(s, "DJF") == pytest.approx(50.0, abs=0.01)

    values = np.ones(4500)
    values[::10] = np.nan
    s = make_series(values)
    assert observed_period(s, "JJA") == pytest.approx(4050 / 92)

    with pytest.raises(InsufficientDataError):
        observed_period(make_series([np.nan, np.nan]), "DJF")


def test_build_exceedances_filters_missing():
    dates = season_dates("JJA", (1950, 1959))
    values = np.ones(dates.size)
    values[::3] = np.nan
    s = DailySeries("S1", 40, -90, dates, values)
    with pytest.raises(ExcessiveMissingError) as info:
        build_exceedances(s, "JJA", (1950, 1959))
    assert info.value.fraction == pytest.approx(1 / 3, abs=0.01)


def test_build_exceedances_summary():
    rng = np.random.default_rng(7)
    dates = season_dates("JJA", (1950, 1959))
    s = DailySeries("S1", 40, -90, dates, rng.integers(0, 100, dates.size).astype(float))
    exc = build_exceedances(s, "JJA", (1950, 1959), percentile=0.95)
    assert exc.n_obs_days == dates.size
    assert exc.T == pytest.approx(10.0)
    assert np.all(exc.peaks > exc.threshold)
    assert math.isclose(exc.missing_fraction, 0.0)


def test_percentile_threshold_is_monotone_and_order_free():
    rng = np.random.default_rng(14)
    values = np.where(rng.random(500) < 0.5, 0.0, rng.integers(1, 400, 500)).astype(float)
    s = make_series(values)
    shuffled = make_series(rng.permutation(values))
    ps = np.linspace(0.90, 0.99, 10)
    thresholds = [percentile_threshold(s, p) for p in ps]
    assert np.all(np.diff(thresholds) >= 0)
    assert thresholds == [percentile_threshold(shuffled, p) for p in ps]


def test_seasons_partition_the_calendar():
    dates = np.arange(np.datetime64("1950-12-01"), np.datetime64("1960-12-01"))
    s = make_series(np.zeros(dates.size), dates=dates)
    parts = [extract_season(s, season, (1951, 1960)).dates for season in ("DJF", "MAM", "JJA", "SON")]
    assert sum(p.size for p in parts) == dates.size
    np.testing.assert_array_equal(np.sort(np.concatenate(parts)), dates)
    leap_days = dates[(dates.astype("datetime64[M]") - dates.astype("datetime64[Y]")).astype(int) == 1]
    leap_days = leap_days[(leap_days - leap_days.astype("datetime64[M]")).astype(int) == 28]
    assert leap_days.size == 3
    assert np.isin(leap_days, parts[0]).all()
