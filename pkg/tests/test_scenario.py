"""
Tests for station-averaged triple comparisons and future/present ratios.
"""
import math

import numpy as np
import pytest

from grid2point.errors import DomainError, PreconditionError
from grid2point.evd import GevParams, ReturnLevel, gev_pdf, return_level
from grid2point.preprocess import DailySeries
from grid2point.scenario import (
    DENSITY_COLUMNS,
    RATIO_COLUMNS,
    RatioResult,
    TripleComparison,
    TripleConfig,
    density_comparison,
    flag_unstable_ratios,
    future_present_ratio,
    ratio_significance,
    ratios_frame,
    select_triple_cells,
    station_average_series,
    summarize_triples,
    triple_comparison,
    triples_frame,
)
from grid2point.synth import SynthConfig, simulate_daily_series


@pytest.fixture
def winter_series():
    return simulate_daily_series(SynthConfig(GevParams(500.0, 200.0, 0.1), years=30, seed=9))


def make_station(site_id, values, start="1950-01-01"):
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + len(values))
    return DailySeries(site_id, 40.0, -90.0, dates, np.asarray(values, dtype=float), elev=100.0)


def test_ratio_and_se():
    r = future_present_ratio(ReturnLevel(1200.0, 120.0, 100), ReturnLevel(1000.0, 100.0, 100), "G0000")
    assert r.ratio == pytest.approx(1.2)
    assert r.se == pytest.approx(1.2 * math.sqrt(0.02))
    assert r.site_id == "G0000"


def test_ratio_needs_positive_levels():
    with pytest.raises(DomainError):
        future_present_ratio(ReturnLevel(1200.0, 1.0, 100), ReturnLevel(0.0, 1.0, 100))
    with pytest.raises(DomainError):
        future_present_ratio(ReturnLevel(-1.0, 1.0, 100), ReturnLevel(1000.0, 1.0, 100))


def test_significance_examples():
    weak = ratio_significance(RatioResult("a", 1.2, 1.2 * math.sqrt(0.02)))
    assert not weak.plain
    assert not weak.log

    strong = ratio_significance(RatioResult("b", 1.5, 0.1))
    assert strong.plain
    assert strong.log

    # Above 1 the log-scale test rejects first.
    mid = ratio_significance(RatioResult("c", 1.3, 0.16))
    assert not mid.plain
    assert mid.log


def test_unstable_ratios_are_flagged_not_dropped():
    results = [RatioResult(str(i), 1.0, se) for i, se in enumerate([1.0, 1.0, 1.0, 10.0])]
    flagged = flag_unstable_ratios(results)
    assert [r.flagged for r in flagged] == [False, False, False, True]
    assert flag_unstable_ratios([]) == []


def test_ratios_frame_layout():
    frame = ratios_frame([RatioResult("G0000", 1.5, 0.1, flagged=True)])
    assert list(frame.columns) == RATIO_COLUMNS
    assert frame.iloc[0].tolist() == ["G0000", 1.5, 0.1, 1, 1, 1]


def test_station_average_skips_missing_but_keeps_zeros():
    s1 = make_station("A", [0.0, 10.0, np.nan, np.nan])
    s2 = make_station("B", [4.0, np.nan, 6.0, np.nan])
    avg = station_average_series([s1, s2])
    np.testing.assert_array_equal(avg.values[:3], [2.0, 10.0, 6.0])
    assert np.isnan(avg.values[3])
    assert avg.elev == 100.0


def test_station_average_aligns_different_dates():
    s1 = make_station("A", [2.0, 2.0])
    s2 = make_station("B", [4.0, 4.0], start="1950-01-02")
    avg = station_average_series([s1, s2])
    assert avg.dates.size == 3
    np.testing.assert_array_equal(avg.values, [2.0, 3.0, 4.0])


def test_station_average_needs_stations():
    with pytest.raises(PreconditionError):
        station_average_series([])


def test_select_triple_cells_needs_more_than_minimum():
    assert select_triple_cells({"b": 66, "a": 70, "c": 65}) == ["a", "b"]
    assert select_triple_cells({"a": 3}, min_stations=2) == ["a"]


def test_identical_stations_agree_with_their_grid(winter_series):
    """Copies of one series give a = b = c."""
    stations = [
        DailySeries(f"S{k}", winter_series.lat, winter_series.lon, winter_series.dates, winter_series.values)
        for k in range(3)
    ]
    cfg = TripleConfig(season="DJF", year_range=(1950, 1979))
    triple = triple_comparison("G0000", stations, winter_series, cfg)
    assert triple.n_stations == 3
    assert triple.b is not None
    assert triple.a == pytest.approx(triple.b, rel=1e-9)
    assert triple.c == pytest.approx(triple.b, rel=1e-9)
    assert triple.a_over_b == pytest.approx(1.0)


def test_failed_fits_are_none(winter_series):
    cfg = TripleConfig(season="JJA", year_range=(1950, 1979))
    triple = triple_comparison("G0000", [winter_series], winter_series, cfg)
    assert triple.a is None and triple.b is None and triple.c is None
    assert triple.a_over_b is None


def test_triples_summary_and_frame():
    rows = [
        TripleComparison("A", a=100.0, b=100.0, c=140.0),
        TripleComparison("B", a=130.0, b=100.0, c=120.0),
        TripleComparison("C", a=None, b=100.0, c=None),
    ]
    summary = summarize_triples(rows)
    assert summary["n_cells"] == 3
    assert summary["frac_a_over_b_near_1"] == pytest.approx(0.5)
    assert summary["frac_c_over_b_above_1_3"] == pytest.approx(0.5)
    assert summary["max_a_over_b"] == pytest.approx(1.3)
    frame = triples_frame(rows)
    assert frame["cell_id"].tolist() == ["A", "B", "C"]
    assert frame["a_over_b"].isna().tolist() == [False, False, True]


@pytest.mark.parametrize("future_sd", [60.0, 120.0])
def test_ratio_se_matches_monte_carlo(future_sd):
    rng = np.random.default_rng(42)
    draws = rng.normal(1200.0, future_sd, 1_000_000) / rng.normal(1000.0, 50.0, 1_000_000)
    r = future_present_ratio(ReturnLevel(1200.0, future_sd, 100), ReturnLevel(1000.0, 50.0, 100))
    assert draws.std() == pytest.approx(r.se, rel=0.05)


def test_plain_and_log_tests_agree_for_small_relative_errors():
    z = 1.959964
    disagreements = []
    cases = [(ratio, rel) for ratio in np.linspace(0.7, 1.4, 141) for rel in np.linspace(0.001, 0.049, 49)]
    for ratio, rel in cases:
        sig = ratio_significance(RatioResult("S", ratio, rel * ratio))
        if sig.plain != sig.log:
            disagreements.append((ratio, rel))
    assert len(disagreements) / len(cases) <= 0.02
    # Any disagreement sits right at the log-scale boundary.
    for ratio, rel in disagreements:
        assert abs(z * rel - abs(math.log(ratio))) <= 0.06 * z * rel


def test_swapping_future_and_present_inverts_the_ratio():
    y_f, y_p = ReturnLevel(1300.0, 90.0, 100), ReturnLevel(1000.0, 70.0, 100)
    forward = future_present_ratio(y_f, y_p)
    backward = future_present_ratio(y_p, y_f)
    assert forward.ratio * backward.ratio == pytest.approx(1.0)
    assert math.log(forward.ratio) == pytest.approx(-math.log(backward.ratio))
    assert forward.se / forward.ratio == pytest.approx(backward.se / backward.ratio)
    assert ratio_significance(forward).log == ratio_significance(backward).log


def test_station_mean_exceeds_the_grid_over_mixed_stations():
    """Stations with different climates give a mean return level above the grid's in most cells."""
    cfg = TripleConfig(season="DJF", year_range=(1950, 1999))
    defined = above = 0
    for rep in range(20):
        stations = [
            simulate_daily_series(SynthConfig(GevParams(mu, 0.4 * mu, 0.1), years=50, seed=1000 * rep + k,
                                              site_id=f"S{k}"))
            for k, mu in enumerate([300.0, 450.0, 600.0, 800.0, 1100.0])
        ]
        grid = station_average_series(stations, site_id="G0000")
        triple = triple_comparison("G0000", stations, grid, cfg)
        if triple.b is not None and triple.c is not None:
            defined += 1
            above += triple.c >= triple.b
    assert defined >= 15
    assert above / defined >= 0.9


def test_density_comparison_shares_one_level_grid():
    cell = GevParams(400.0, 150.0, 0.1)
    stations = {"S2": GevParams(600.0, 250.0, 0.15), "S1": GevParams(500.0, 200.0, 0.05)}
    frame = density_comparison("G0000", cell, stations, n_points=40)
    assert list(frame.columns) == DENSITY_COLUMNS
    assert frame["site_id"].unique().tolist() == ["G0000", "S1", "S2"]
    assert frame["source"].unique().tolist() == ["grid", "station"]
    levels = frame.groupby("site_id")["level"].apply(list)
    assert levels["G0000"] == levels["S1"] == levels["S2"]
    assert levels["G0000"][0] == pytest.approx(100.0)
    assert levels["G0000"][-1] == pytest.approx(return_level(stations["S2"], 100))
    first = frame.iloc[0]
    assert first["density"] == pytest.approx(gev_pdf(cell, first["level"]))
    assert (frame["density"] >= 0).all()


def test_density_comparison_needs_two_levels():
    with pytest.raises(PreconditionError):
        density_comparison("G0000", GevParams(400.0, 150.0, 0.1), {}, n_points=1)
