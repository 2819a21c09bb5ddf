"""
Tests for station-to-cell pairing, the log-scale regression, AIC selection and predictions.
"""
import dataclasses
import math

import numpy as np
import pytest

from grid2point.errors import NoCellError, PerfectFitError, PreconditionError, SingularDesignError
from grid2point.regression import (
    COEFFICIENT_COLUMNS,
    DesignSpec,
    GridDefinition,
    PairedRecord,
    RegressionFit,
    aic,
    assign_station_to_cell,
    build_design,
    coefficient_table,
    design_terms,
    fit_ols,
    fit_records,
    predict_many,
    predict_point_return,
    select_model,
)

CUBIC_BETA = np.array([
    5.5, 0.002, 1e-4,            # intercept, grid, elev
    -0.02, 0.01,                 # lat, lon
    -1e-3, 5e-4, 2e-4,           # lat^2, lat*lon, lon^2
    1e-4, -5e-5, 3e-5, -1e-5,    # lat^3, lat^2*lon, lat*lon^2, lon^3
])


@pytest.fixture
def grid():
    return GridDefinition.regular(35.0, -97.5, 2.5, 2, 2)


def random_records(rng, n, y_point=None):
    lat = rng.uniform(30, 48, n)
    lon = rng.uniform(-120, -75, n)
    elev = rng.uniform(0, 2000, n)
    x_grid = rng.uniform(200, 800, n)
    y = np.ones(n) if y_point is None else y_point
    return [PairedRecord(f"S{i:04d}", "G0000", float(y[i]), float(x_grid[i]), float(elev[i]),
                         float(lat[i]), float(lon[i])) for i in range(n)]


def with_response(records, y):
    return [dataclasses.replace(r, y_point=float(v)) for r, v in zip(records, y)]


def test_station_in_cell(grid):
    assert assign_station_to_cell(36.0, -96.5, grid) == "0_0"
    assert assign_station_to_cell(37.0, -95.5, grid) == "1_1"


def test_boundary_goes_to_lower_index(grid):
    assert assign_station_to_cell(36.25, -97.5, grid) == "0_0"
    assert assign_station_to_cell(35.0, -96.25, grid) == "0_0"


def test_station_outside_grid(grid):
    with pytest.raises(NoCellError):
        assign_station_to_cell(70.0, -40.0, grid)


def test_unpopulated_cell_is_rejected():
    sparse = GridDefinition(spacing=2.5, centers={"a": (35.0, -97.5), "b": (37.5, -95.0)})
    with pytest.raises(NoCellError):
        assign_station_to_cell(35.0, -95.0, sparse)


@pytest.mark.parametrize("degree, columns", [(0, 3), (3, 12), (4, 17)])
def test_design_column_counts(degree, columns):
    records = random_records(np.random.default_rng(0), 30)
    design = build_design(records, DesignSpec(True, True, degree))
    assert design.X.shape == (30, columns)
    assert len(design.terms) == columns


def test_design_terms_and_log_grid():
    assert design_terms(DesignSpec(True, True, 2)) == [
        "intercept", "grid", "elev", "lat", "lon", "lat^2", "lat*lon", "lon^2",
    ]
    records = random_records(np.random.default_rng(1), 10)
    design = build_design(records, DesignSpec(True, False, 0, log_grid=True))
    np.testing.assert_allclose(design.X[:, 1], np.log([r.x_grid for r in records]))


def test_degree_out_of_range():
    with pytest.raises(PreconditionError):
        DesignSpec(latlon_degree=5)


def test_ols_exact_line():
    X = np.column_stack([np.ones(3), [0.0, 1.0, 2.0]])
    fit = fit_ols(X, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(fit.coeffs, [1.0, 1.0], atol=1e-12)
    assert fit.rss == pytest.approx(0.0, abs=1e-20)


def test_ols_recovers_known_coefficients():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 4))])
    beta = np.array([1.0, -2.0, 0.5, 3.0, 0.25])
    fit = fit_ols(X, X @ beta)
    np.testing.assert_allclose(fit.coeffs, beta, atol=1e-10)


def test_ols_rank_deficient():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x, 2 * x])
    with pytest.raises(SingularDesignError):
        fit_ols(X, x)


def test_aic_examples():
    X = np.column_stack([np.ones(5), np.arange(5.0)])
    base = fit_ols(X, np.array([0.0, 1.5, 1.0, 3.5, 4.0]))
    assert aic(dataclasses.replace(base, n=100, rss=100.0, k=3)) == pytest.approx(8.0)
    assert aic(dataclasses.replace(base, n=100, rss=100.0, k=5)) == pytest.approx(12.0)
    with pytest.raises(PerfectFitError):
        aic(dataclasses.replace(base, rss=0.0))


def test_noise_column_never_increases_rss():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = X @ [1.0, 2.0] + rng.normal(size=40)
    small = fit_ols(X, y)
    big = fit_ols(np.column_stack([X, rng.normal(size=40)]), y)
    assert big.rss <= small.rss
    expected_worse = big.rss > small.rss * math.exp(-2.0 / 40)
    assert (big.aic > small.aic) == expected_worse


def test_cubic_surface_recovery():
    """Coefficients within 3 SEs and degree 3 beating degree 1 on AIC, replication after replication."""
    rng = np.random.default_rng(2024)
    spec3 = DesignSpec(True, True, 3)
    spec1 = DesignSpec(True, True, 1)
    within = []
    for _ in range(100):
        records = random_records(rng, 2000)
        design = build_design(records, spec3)
        log_y = design.X @ CUBIC_BETA + rng.normal(0.0, 0.2, size=2000)
        records = with_response(records, np.exp(log_y))
        fit3 = fit_records(records, spec3)
        fit1 = fit_records(records, spec1)
        within.append(np.abs(fit3.coeffs - CUBIC_BETA) <= 3 * fit3.coeff_ses)
        assert fit3.aic < fit1.aic
    assert np.all(np.mean(within, axis=0) >= 0.95)


def test_select_model_prefers_cubic_over_low_degrees():
    rng = np.random.default_rng(77)
    records = random_records(rng, 2000)
    design = build_design(records, DesignSpec(True, True, 3))
    records = with_response(records, np.exp(design.X @ CUBIC_BETA + rng.normal(0.0, 0.2, size=2000)))
    best = select_model(records)
    assert best.spec.latlon_degree >= 3
    table = best.aic_table
    assert table["selected"].sum() == 1
    cubic_aic = table.loc[table["degree"] == 3, "aic"].item()
    assert cubic_aic < table.loc[table["degree"] == 1, "aic"].item()


def test_select_model_usually_picks_intercept_for_noise():
    rng = np.random.default_rng(5)
    records = random_records(rng, 2000)
    wins = 0
    for _ in range(2000):
        noisy = with_response(records, np.exp(rng.normal(6.0, 0.2, size=2000)))
        wins += select_model(noisy).spec.latlon_degree == 0
    assert wins / 2000 >= 0.80


def test_cubic_stays_within_two_aic_of_the_winner():
    rng = np.random.default_rng(31)
    records = random_records(rng, 2000)
    design = build_design(records, DesignSpec(True, True, 3))
    close = 0
    for _ in range(50):
        best = select_model(with_response(records, np.exp(design.X @ CUBIC_BETA + rng.normal(0.0, 0.2, 2000))))
        assert best.spec.latlon_degree >= 3
        table = best.aic_table
        close += table.loc[table["degree"] == 3, "aic"].item() - table["aic"].min() <= 2.0
    assert close / 50 >= 0.9


def test_residuals_are_orthogonal_to_the_design():
    rng = np.random.default_rng(12)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 5))])
    y = X @ rng.normal(size=6) + rng.normal(size=200)
    fit = fit_ols(X, y)
    assert np.max(np.abs(X.T @ fit.residuals)) < 1e-8 * np.linalg.norm(y)


def test_predictions_do_not_depend_on_centering():
    rng = np.random.default_rng(13)
    records = random_records(rng, 300)
    records = with_response(records, np.exp(rng.normal(6.0, 0.3, size=300)))
    spec = DesignSpec(True, True, 2)
    default = fit_records(records, spec)
    shifted_center = (default.center[0] + 1.7, default.center[1] - 3.2)
    design = build_design(records, spec, center=shifted_center)
    shifted = fit_ols(design.X, design.y, spec=spec, terms=design.terms, center=shifted_center)

    assert not np.allclose(shifted.coeffs, default.coeffs)
    args = (np.array([400.0, 650.0]), np.array([300.0, 1200.0]), np.array([36.0, 44.0]), np.array([-110.0, -80.0]))
    level_a, se_a = predict_many(default, *args)
    level_b, se_b = predict_many(shifted, *args)
    np.testing.assert_allclose(level_b, level_a, rtol=1e-8)
    np.testing.assert_allclose(se_b, se_a, rtol=1e-6)
    np.testing.assert_allclose(shifted.residuals, default.residuals, atol=1e-9)


def test_select_model_single_candidate():
    records = with_response(random_records(np.random.default_rng(6), 40),
                            np.exp(np.random.default_rng(7).normal(6, 0.1, 40)))
    spec = DesignSpec(True, True, 1)
    best = select_model(records, [spec])
    assert best.spec == spec
    assert best.aic_table["selected"].tolist() == [True]


def test_published_coefficients_prediction():
    """Winter 95th-percentile coefficients at a grid level of 429 and 200 m elevation."""
    fit = RegressionFit.from_coefficients(DesignSpec(True, True, 0), [5.32, 0.0030, -0.00012])
    level, se = predict_point_return(fit, 429.0, 200.0, 40.0, -90.0)
    assert level == pytest.approx(723.0, abs=1.0)
    assert se == 0.0


def test_intercept_only_prediction():
    fit = RegressionFit.from_coefficients(DesignSpec(False, False, 0), [2.0])
    level, _ = predict_point_return(fit, 500.0, 100.0, 40.0, -90.0)
    assert level == pytest.approx(math.exp(2.0))


def test_prediction_se_is_relative_log_scale_sd():
    rng = np.random.default_rng(8)
    records = random_records(rng, 200)
    records = with_response(records, np.exp(rng.normal(6.0, 0.3, size=200)))
    fit = fit_records(records, DesignSpec(True, True, 2))
    level, se = predict_many(fit, np.array([400.0]), np.array([300.0]), np.array([40.0]), np.array([-100.0]))
    design = build_design(
        [PairedRecord("t", "c", 1.0, 400.0, 300.0, 40.0, -100.0)], fit.spec, center=fit.center
    )
    x = design.X[0]
    v = fit.sigma2 * (1 + x @ fit.xtx_inv @ x)
    assert se[0] / level[0] == pytest.approx(math.sqrt(v))


def test_coefficient_table_layout():
    fit = RegressionFit.from_coefficients(DesignSpec(True, True, 0), [5.32, 0.0030, -0.00012])
    table = coefficient_table(fit, "DJF", 0.95)
    assert list(table.columns) == COEFFICIENT_COLUMNS
    assert table["term"].tolist() == ["intercept", "grid", "elev"]


def test_point_level_must_be_positive():
    with pytest.raises(PreconditionError):
        PairedRecord("S1", "C1", 0.0, 400.0, 10.0, 40.0, -90.0)
