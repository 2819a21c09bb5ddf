"""Synthetic daily precipitation with known point-process tails.

Every draw goes through ``numpy.random.default_rng`` (PCG64) seeded with an
integer, so a config and seed always reproduce the same series. Values are
integer tenths of a millimeter. Below the threshold a day is dry with
probability ``dry_prob`` and otherwise a uniform integer in ``[1, floor(u)]``;
above it, exceedances follow the point process of the true GEV parameters and
fall on mutually non-adjacent days.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import DegenerateConfigError, PreconditionError
from .evd import XI_EPS, GevParams, pp_tail_measure
from .preprocess import SEASON_LENGTH, SEASON_MONTHS, DailySeries, YearRange, calendar_parts, season_years

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator]


@dataclass
class SynthConfig:
    """One synthetic site.

    Attributes:
        truth: GEV parameters of the exceedance point process
        quantile: Daily quantile the true threshold sits at
        years: Number of season-years to generate
        season: DJF, MAM, JJA or SON
        first_year: First season-year
        dry_prob: Probability that a day below the threshold is dry
        missing_rate: Probability that a day is missing, independently
        seed: Integer seed for the generator
    """

    truth: GevParams
    quantile: float = 0.95
    years: int = 50
    season: str = "DJF"
    first_year: int = 1950
    dry_prob: float = 0.6
    missing_rate: float = 0.0
    seed: int = 0
    site_id: str = "SYN0001"
    lat: float = 40.0
    lon: float = -90.0
    elev: Optional[float] = None

    def __post_init__(self):
        if self.season not in SEASON_MONTHS:
            raise PreconditionError(f"unknown season {self.season!r}")
        if not 0 < self.quantile < 1:
            raise PreconditionError(f"quantile must lie in (0, 1), got {self.quantile}")
        if self.years < 1:
            raise PreconditionError(f"need at least one year, got {self.years}")
        if not 0 <= self.dry_prob <= 1 or not 0 <= self.missing_rate < 1:
            raise PreconditionError("dry_prob must lie in [0, 1] and missing_rate in [0, 1)")

    @property
    def year_range(self) -> YearRange:
        return (self.first_year, self.first_year + self.years - 1)


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def threshold_for_quantile(truth: GevParams, q: float, season: str) -> float:
    """Level exceeded on a fraction ``1 - q`` of days under ``truth``.

    Solves ``pp_tail_measure(truth, u) == (1 - q) * season_length``.
    """
    if not 0 < q < 1:
        raise PreconditionError(f"quantile must lie in (0, 1), got {q}")
    rate = (1.0 - q) * SEASON_LENGTH[season]
    if abs(truth.xi) < XI_EPS:
        return truth.mu - truth.psi * math.log(rate)
    return truth.mu + truth.psi * math.expm1(-truth.xi * math.log(rate)) / truth.xi


def simulate_pp_exceedances(truth: GevParams, u: float, T: float, seed: SeedLike) -> np.ndarray:
    """Peaks over ``u`` from the point process of ``truth`` over ``T`` season-years.

    The count is Poisson with mean ``T * Lambda(u)``; excesses are generalized
    Pareto with scale ``psi + xi (u - mu)`` and shape ``xi``, drawn by inverse
    transform.

    Raises:
        DegenerateConfigError: ``u`` outside the support or no expected exceedances
    """
    if not T > 0:
        raise PreconditionError(f"observation period must be positive, got T={T}")
    lam = pp_tail_measure(truth, u)
    if not 0 < lam < math.inf:
        raise DegenerateConfigError(f"expected exceedances of u={u} per year is {lam} under {truth}")
    sigma = truth.psi + truth.xi * (u - truth.mu)
    if not sigma > 0:
        raise DegenerateConfigError(f"excess scale {sigma} is not positive at u={u}")

    rng = _rng(seed)
    n = int(rng.poisson(T * lam))
    # 1 - random() lies in (0, 1], keeping the log finite.
    log_v = np.log1p(-rng.random(n))
    if abs(truth.xi) < XI_EPS:
        excess = -sigma * log_v
    else:
        excess = sigma * np.expm1(-truth.xi * log_v) / truth.xi
    return u + excess


def season_dates(season: str, year_range: YearRange) -> np.ndarray:
    """Every calendar day of ``season`` in the inclusive season-year range."""
    start = np.datetime64(f"{year_range[0] - 1}-12-01", "D")
    stop = np.datetime64(f"{year_range[1] + 1}-01-01", "D")
    days = np.arange(start, stop, dtype="datetime64[D]")
    _, months = calendar_parts(days)
    sy = season_years(days, season)
    keep = np.isin(months, SEASON_MONTHS[season]) & (sy >= year_range[0]) & (sy <= year_range[1])
    return days[keep]


def _non_adjacent_positions(rng: np.random.Generator, n_days: int, n: int) -> np.ndarray:
    # Sorted distinct slots in [0, n_days - n], shifted by rank, differ by at least 2.
    if n > (n_days + 1) // 2:
        raise DegenerateConfigError(f"{n} exceedances cannot be spread over {n_days} days without touching")
    slots = np.sort(rng.choice(n_days - n + 1, size=n, replace=False))
    return slots + np.arange(n)


def simulate_daily_series(cfg: SynthConfig) -> DailySeries:
    """Daily series whose exceedances of the true threshold follow ``cfg.truth``."""
    rng = _rng(cfg.seed)
    dates = season_dates(cfg.season, cfg.year_range)
    n_days = dates.size
    u = threshold_for_quantile(cfg.truth, cfg.quantile, cfg.season)
    top = math.floor(u)

    peaks = simulate_pp_exceedances(cfg.truth, u, n_days / SEASON_LENGTH[cfg.season], rng)
    values = np.zeros(n_days)
    if top >= 1:
        wet = rng.random(n_days) >= cfg.dry_prob
        values = np.where(wet, rng.integers(1, top + 1, size=n_days), 0).astype(float)
    if peaks.size:
        positions = _non_adjacent_positions(rng, n_days, peaks.size)
        values[positions] = np.maximum(np.round(peaks), top + 1)
    if cfg.missing_rate > 0:
        values[rng.random(n_days) < cfg.missing_rate] = np.nan

    logger.debug("%s: %d days, u=%.1f, %d exceedances", cfg.site_id, n_days, u, peaks.size)
    return DailySeries(
        site_id=cfg.site_id, lat=cfg.lat, lon=cfg.lon, dates=dates, values=values,
        elev=cfg.elev,
    )


@dataclass
class NetworkConfig:
    """A block of grid cells, each holding synthetic stations.

    Station location and scale parameters vary smoothly with position and
    elevation; grid cells get the parameters at their centers damped by
    ``grid_damping``, mimicking area-averaged fields. A future grid, when
    ``future_scale`` is set, multiplies the cell location and scale.
    """

    n_lat: int = 2
    n_lon: int = 2
    spacing: float = 2.5
    lat0: float = 35.0
    lon0: float = -95.0
    stations_per_cell: int = 12
    years: int = 30
    season: str = "DJF"
    first_year: int = 1950
    quantile: float = 0.95
    base: GevParams = field(default_factory=lambda: GevParams(500.0, 200.0, 0.1))
    lat_gradient: float = -0.04
    lon_gradient: float = 0.03
    elev_gradient: float = 0.0002
    max_elev: float = 1500.0
    grid_damping: float = 0.6
    future_scale: Optional[float] = None
    dry_prob: float = 0.6
    missing_rate: float = 0.0
    seed: int = 2024

    @property
    def year_range(self) -> YearRange:
        return (self.first_year, self.first_year + self.years - 1)

    def cell_id(self, i: int, j: int) -> str:
        return f"G{i:02d}{j:02d}"

    def cell_center(self, i: int, j: int):
        return self.lat0 + i * self.spacing, self.lon0 + j * self.spacing


@dataclass
class SyntheticNetwork:
    stations: List[DailySeries]
    cells: List[DailySeries]
    future_cells: Optional[List[DailySeries]]
    truth: Dict[str, GevParams]


def site_truth(cfg: NetworkConfig, lat: float, lon: float, elev: float, factor: float = 1.0) -> GevParams:
    """Parameters at a location: log-linear in position and elevation."""
    scale = factor * math.exp(
        cfg.lat_gradient * (lat - cfg.lat0)
        + cfg.lon_gradient * (lon - cfg.lon0)
        + cfg.elev_gradient * elev
    )
    return GevParams(cfg.base.mu * scale, cfg.base.psi * scale, cfg.base.xi)


def simulate_network(cfg: NetworkConfig) -> SyntheticNetwork:
    """Stations nested in grid cells with independently seeded series."""
    rng = np.random.default_rng(cfg.seed)
    n_cells = cfg.n_lat * cfg.n_lon
    n_stations = n_cells * cfg.stations_per_cell
    children = np.random.SeedSequence(cfg.seed).spawn(n_stations + 2 * n_cells)
    seeds = [int(c.generate_state(1)[0]) for c in children]

    def series(truth, site_id, lat, lon, elev, seed) -> DailySeries:
        return simulate_daily_series(SynthConfig(
            truth=truth, quantile=cfg.quantile, years=cfg.years, season=cfg.season,
            first_year=cfg.first_year, dry_prob=cfg.dry_prob, missing_rate=cfg.missing_rate,
            seed=seed, site_id=site_id, lat=lat, lon=lon, elev=elev,
        ))

    stations: List[DailySeries] = []
    cells: List[DailySeries] = []
    future: Optional[List[DailySeries]] = [] if cfg.future_scale else None
    truth: Dict[str, GevParams] = {}
    half = cfg.spacing / 2.0
    k = 0
    for c, (i, j) in enumerate((i, j) for i in range(cfg.n_lat) for j in range(cfg.n_lon)):
        cid = cfg.cell_id(i, j)
        clat, clon = cfg.cell_center(i, j)
        # Kept inside the cell so boundary ties never arise.
        lats = rng.uniform(clat - 0.95 * half, clat + 0.95 * half, cfg.stations_per_cell)
        lons = rng.uniform(clon - 0.95 * half, clon + 0.95 * half, cfg.stations_per_cell)
        elevs = np.round(rng.uniform(0.0, cfg.max_elev, cfg.stations_per_cell))
        for lat, lon, elev in zip(lats, lons, elevs):
            sid = f"S{k + 1:04d}"
            truth[sid] = site_truth(cfg, lat, lon, elev)
            stations.append(series(truth[sid], sid, float(lat), float(lon), float(elev), seeds[k]))
            k += 1
        truth[cid] = site_truth(cfg, clat, clon, 0.0, cfg.grid_damping)
        cells.append(series(truth[cid], cid, clat, clon, None, seeds[n_stations + c]))
        if future is not None:
            ftruth = site_truth(cfg, clat, clon, 0.0, cfg.grid_damping * cfg.future_scale)
            future.append(series(ftruth, cid, clat, clon, None, seeds[n_stations + n_cells + c]))
    logger.info("simulated %d stations in %d cells", len(stations), len(cells))
    return SyntheticNetwork(stations=stations, cells=cells, future_cells=future, truth=truth)
