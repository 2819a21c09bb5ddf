"""Seasonal extraction, missing-data accounting, thresholds and declustering.

Values are daily precipitation in tenths of a millimeter; missing days are NaN.
December belongs to the following year's winter, so winter 1950 runs from
December 1949 through February 1950.
"""
import datetime
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ExcessiveMissingError, InsufficientDataError, PreconditionError

logger = logging.getLogger(__name__)

SEASONS = ("DJF", "MAM", "JJA", "SON")

SEASON_MONTHS: Dict[str, Tuple[int, int, int]] = {
    "DJF": (12, 1, 2),
    "MAM": (3, 4, 5),
    "JJA": (6, 7, 8),
    "SON": (9, 10, 11),
}

# Days per season-year; the winter figure amortizes February 29.
SEASON_LENGTH: Dict[str, float] = {
    "DJF": 90.25,
    "MAM": 92.0,
    "JJA": 92.0,
    "SON": 91.0,
}

DEFAULT_MISSING_CUTOFF = 0.1
MIN_THRESHOLD_OBS = 20

YearRange = Tuple[int, int]


@dataclass
class DailySeries:
    """Daily precipitation for one station or grid cell.

    Attributes:
        site_id: Station or cell identifier
        lat: Latitude in degrees north
        lon: Longitude in degrees east (negative = west)
        dates: ``datetime64[D]`` array, strictly increasing
        values: Float array, tenths of mm, NaN where missing
        elev: Elevation in meters (None for grid cells)
        season: Set when the series was cut down to one season
    """

    site_id: str
    lat: float
    lon: float
    dates: np.ndarray
    values: np.ndarray
    elev: Optional[float] = None
    season: Optional[str] = None

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.values = np.asarray(self.values, dtype=float)
        if self.dates.shape != self.values.shape:
            raise PreconditionError(f"{self.site_id}: dates and values differ in length")
        if self.dates.size > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise PreconditionError(f"{self.site_id}: dates must be strictly increasing")
        if np.any(self.values[~np.isnan(self.values)] < 0):
            raise PreconditionError(f"{self.site_id}: precipitation values must be non-negative")

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def __len__(self) -> int:
        return int(self.dates.size)


@dataclass
class SeasonalExceedances:
    """Peaks over a threshold for one site and season."""

    site_id: str
    season: str
    threshold: float
    peaks: np.ndarray
    T: float
    n_obs_days: int
    missing_fraction: float
    percentile: float = 0.95
    lat: float = math.nan
    lon: float = math.nan
    elev: Optional[float] = None


def _check_season(season: str) -> str:
    if season not in SEASON_MONTHS:
        raise PreconditionError(f"unknown season {season!r}; expected one of {', '.join(SEASONS)}")
    return season


def calendar_parts(dates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Calendar years and months (1-12) of a ``datetime64[D]`` array."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    months = dates.astype("datetime64[M]").astype(int)
    return months // 12 + 1970, months % 12 + 1


def season_years(dates: np.ndarray, season: str) -> np.ndarray:
    """Season-year of each date; December days count toward the next year's winter."""
    years, months = calendar_parts(dates)
    if season == "DJF":
        return years + (months == 12)
    return years


def _season_mask(dates: np.ndarray, season: str, year_range: YearRange) -> np.ndarray:
    _, months = calendar_parts(dates)
    in_season = np.isin(months, SEASON_MONTHS[season])
    sy = season_years(dates, season)
    return in_season & (sy >= year_range[0]) & (sy <= year_range[1])


def extract_season(s: DailySeries, season: str, year_range: YearRange) -> DailySeries:
    """Days of ``s`` that fall in ``season`` for season-years within ``year_range``.

    Args:
        s: Full daily series
        season: One of DJF, MAM, JJA, SON
        year_range: Inclusive (first, last) season-years

    Returns:
        A new series with ``season`` set; may be empty.
    """
    _check_season(season)
    mask = _season_mask(s.dates, season, year_range)
    return replace(s, dates=s.dates[mask], values=s.values[mask], season=season)


def expected_season_days(season: str, year_range: YearRange) -> int:
    """Calendar days in ``season`` over the inclusive season-year range."""
    _check_season(season)
    first_month = SEASON_MONTHS[season][0]
    total = 0
    for year in range(year_range[0], year_range[1] + 1):
        if season == "DJF":
            start = datetime.date(year - 1, 12, 1)
            end = datetime.date(year, 3, 1)
        else:
            start = datetime.date(year, first_month, 1)
            end_month = first_month + 3
            end = datetime.date(year + end_month // 13, (end_month - 1) % 12 + 1, 1)
        total += (end - start).days
    return total


def missing_fraction(s: DailySeries, season: str, year_range: YearRange) -> float:
    """Share of expected season days that are missing or absent from ``s``."""
    expected = expected_season_days(season, year_range)
    if expected == 0:
        return 1.0
    mask = _season_mask(s.dates, season, year_range)
    observed = int(np.count_nonzero(mask & ~np.isnan(s.values)))
    return (expected - observed) / expected


def passes_missing_filter(fraction: float, eps: float = DEFAULT_MISSING_CUTOFF) -> bool:
    """A site is kept when its missing fraction does not exceed ``eps``."""
    return fraction <= eps


def percentile_threshold(s: DailySeries, p: float) -> float:
    """Smallest observed value with at least a fraction ``p`` of days at or below it.

    Missing days are excluded; dry days (0) are included.
    """
    values = s.values[~np.isnan(s.values)]
    m = values.size
    if m < MIN_THRESHOLD_OBS:
        raise InsufficientDataError(
            f"{s.site_id}: need at least {MIN_THRESHOLD_OBS} observations for a threshold, got {m}"
        )
    if not 0 < p < 1:
        raise PreconditionError(f"percentile must lie in (0, 1), got {p}")
    # Guard against p*m landing a hair above an integer (0.95 * 100).
    rank = max(1, math.ceil(p * m - 1e-9))
    return float(np.sort(values)[rank - 1])


def _run_starts(s: DailySeries, exceed: np.ndarray) -> np.ndarray:
    if s.dates.size == 0:
        return np.zeros(0, dtype=bool)
    consecutive = np.diff(s.dates) == np.timedelta64(1, "D")
    if s.season is not None:
        sy = season_years(s.dates, s.season)
        consecutive &= np.diff(sy) == 0
    continues = np.concatenate(([False], consecutive & exceed[:-1]))
    return exceed & ~continues


def decluster_runs(s: DailySeries, u: float) -> np.ndarray:
    """Cluster maxima of the runs of consecutive days above ``u``.

    A run ends at a day at or below ``u``, a missing day, a gap in the dates,
    or a change of season-year.
    """
    if not math.isfinite(u):
        raise PreconditionError(f"threshold must be finite, got {u}")
    with np.errstate(invalid="ignore"):
        exceed = s.values > u
    if not exceed.any():
        return np.zeros(0, dtype=float)
    starts = _run_starts(s, exceed)
    idx = np.flatnonzero(exceed)
    run_id = np.cumsum(starts)[idx]
    # Runs are contiguous in idx, so reduceat over run boundaries gives the maxima.
    boundaries = np.flatnonzero(np.concatenate(([True], np.diff(run_id) != 0)))
    return np.maximum.reduceat(s.values[idx], boundaries)


def all_exceedances(s: DailySeries, u: float) -> np.ndarray:
    """Every value above ``u`` treated as its own peak."""
    with np.errstate(invalid="ignore"):
        return s.values[s.values > u].astype(float)


def observed_period(s: DailySeries, season: str) -> float:
    """Observed length of ``s`` in season-years, ignoring missing days."""
    _check_season(season)
    n_obs = int(np.count_nonzero(~np.isnan(s.values)))
    if n_obs == 0:
        raise InsufficientDataError(f"{s.site_id}: no observed days in {season}")
    return n_obs / SEASON_LENGTH[season]


def build_exceedances(
    s: DailySeries,
    season: str,
    year_range: YearRange,
    percentile: float = 0.95,
    eps: float = DEFAULT_MISSING_CUTOFF,
    decluster: bool = True,
) -> SeasonalExceedances:
    """Season extraction, missing filter, threshold and peaks for one series.

    Raises:
        ExcessiveMissingError: missing fraction above ``eps``
        InsufficientDataError: too few observations for a threshold
    """
    fraction = missing_fraction(s, season, year_range)
    if not passes_missing_filter(fraction, eps):
        raise ExcessiveMissingError(
            f"{s.site_id}: {fraction:.1%} of {season} days missing (cutoff {eps:.0%})", fraction
        )
    seasonal = extract_season(s, season, year_range)
    u = percentile_threshold(seasonal, percentile)
    T = observed_period(seasonal, season)
    peaks = decluster_runs(seasonal, u) if decluster else all_exceedances(seasonal, u)
    logger.debug("%s: u=%.1f, %d peaks over T=%.2f season-years", s.site_id, u, peaks.size, T)
    return SeasonalExceedances(
        site_id=s.site_id,
        season=season,
        threshold=u,
        peaks=peaks,
        T=T,
        n_obs_days=int(np.count_nonzero(~np.isnan(seasonal.values))),
        missing_fraction=fraction,
        percentile=percentile,
        lat=s.lat,
        lon=s.lon,
        elev=s.elev,
    )
