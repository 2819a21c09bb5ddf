"""Station-averaged comparisons and future/present return-level ratios."""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import DomainError, InsufficientDataError, PreconditionError
from .evd import GevParams, ReturnLevel, gev_pdf, return_level
from .fitting import fit_series, return_level_with_se
from .preprocess import DEFAULT_MISSING_CUTOFF, DailySeries, YearRange

logger = logging.getLogger(__name__)

DEFAULT_MIN_STATIONS = 65
UNSTABLE_SE_FACTOR = 5.0


@dataclass
class TripleComparison:
    """Return levels for one grid cell computed three ways.

    Attributes:
        a: From the station-averaged daily series
        b: From the grid cell's own series
        c: Mean of the individual station return levels
    """

    cell_id: str
    a: Optional[float]
    b: Optional[float]
    c: Optional[float]
    lat: float = math.nan
    lon: float = math.nan
    n_stations: int = 0

    @property
    def a_over_b(self) -> Optional[float]:
        return self.a / self.b if self.a is not None and self.b else None

    @property
    def c_over_b(self) -> Optional[float]:
        return self.c / self.b if self.c is not None and self.b else None


@dataclass
class RatioResult:
    """Future-to-present ratio of return levels at one site."""

    site_id: str
    ratio: float
    se: float
    flagged: bool = False


@dataclass
class Significance:
    """Whether a ratio differs from 1 on the plain and on the log scale."""

    plain: bool
    log: bool


@dataclass
class TripleConfig:
    """Settings shared by every fit inside a triple comparison."""

    season: str = "DJF"
    year_range: YearRange = (1950, 1999)
    percentile: float = 0.95
    return_period: float = 100
    eps: float = DEFAULT_MISSING_CUTOFF
    decluster: bool = True


def station_average_series(stations: Sequence[DailySeries], site_id: str = "station_average") -> DailySeries:
    """Daily mean over stations, skipping missing values but keeping zeros.

    A day is missing only when every station is missing. Coordinates are the
    station means.
    """
    if not stations:
        raise PreconditionError("need at least one station to average")
    frame = pd.concat(
        [pd.Series(s.values, index=pd.DatetimeIndex(s.dates), name=s.site_id) for s in stations],
        axis=1,
        sort=True,
    )
    mean = frame.mean(axis=1, skipna=True)
    elevs = [s.elev for s in stations if s.elev is not None]
    return DailySeries(
        site_id=site_id,
        lat=float(np.mean([s.lat for s in stations])),
        lon=float(np.mean([s.lon for s in stations])),
        dates=mean.index.values.astype("datetime64[D]"),
        values=mean.to_numpy(dtype=float),
        elev=float(np.mean(elevs)) if elevs else None,
    )


def _return_value(series: DailySeries, cfg: TripleConfig) -> Optional[float]:
    try:
        _, fit = fit_series(series, cfg.season, cfg.year_range, cfg.percentile, cfg.eps, cfg.decluster)
    except (InsufficientDataError, ValueError) as e:
        logger.info("%s: no return level (%s)", series.site_id, e)
        return None
    if not fit.converged:
        logger.info("%s: fit failed (%s)", series.site_id, fit.message)
        return None
    return return_level_with_se(fit, cfg.return_period).value


def triple_comparison(
    cell_id: str,
    stations: Sequence[DailySeries],
    grid_series: DailySeries,
    cfg: Optional[TripleConfig] = None,
) -> TripleComparison:
    """Compare (a) the station-average fit, (b) the grid fit and (c) the mean station fit.

    Entries whose fits fail are None.
    """
    cfg = cfg or TripleConfig()
    if not stations:
        raise PreconditionError(f"cell {cell_id} has no stations")
    averaged = station_average_series(stations, site_id=f"{cell_id}:average")
    a = _return_value(averaged, cfg)
    b = _return_value(grid_series, cfg)
    station_levels = [v for v in (_return_value(s, cfg) for s in stations) if v is not None]
    c = float(np.mean(station_levels)) if station_levels else None
    return TripleComparison(
        cell_id=cell_id, a=a, b=b, c=c, lat=grid_series.lat, lon=grid_series.lon,
        n_stations=len(stations),
    )


def select_triple_cells(station_counts: Mapping[str, int], min_stations: int = DEFAULT_MIN_STATIONS) -> List[str]:
    """Cells holding more than ``min_stations`` usable stations, in id order."""
    return sorted(cid for cid, count in station_counts.items() if count > min_stations)


TRIPLE_COLUMNS = ["cell_id", "lat_deg", "lon_deg", "n_stations", "a", "b", "c", "a_over_b", "c_over_b"]


def triples_frame(rows: Iterable[TripleComparison]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            [r.cell_id, r.lat, r.lon, r.n_stations, r.a, r.b, r.c, r.a_over_b, r.c_over_b]
            for r in rows
        ],
        columns=TRIPLE_COLUMNS,
    )


def summarize_triples(rows: Sequence[TripleComparison]) -> Dict[str, float]:
    """Share of cells with a/b in [0.8, 1.2] and with c/b above 1.3."""
    ab = np.array([r.a_over_b for r in rows if r.a_over_b is not None])
    cb = np.array([r.c_over_b for r in rows if r.c_over_b is not None])
    return {
        "n_cells": len(rows),
        "frac_a_over_b_near_1": float(np.mean((ab >= 0.8) & (ab <= 1.2))) if ab.size else math.nan,
        "frac_c_over_b_above_1_3": float(np.mean(cb > 1.3)) if cb.size else math.nan,
        "max_a_over_b": float(ab.max()) if ab.size else math.nan,
        "max_c_over_b": float(cb.max()) if cb.size else math.nan,
    }


def future_present_ratio(y_future: ReturnLevel, y_present: ReturnLevel, site_id: str = "") -> RatioResult:
    """Ratio of independent future and present return levels with its delta-method SE."""
    if not y_present.value > 0:
        raise DomainError(f"{site_id}: present return level must be positive, got {y_present.value}")
    if not y_future.value > 0:
        raise DomainError(f"{site_id}: future return level must be positive, got {y_future.value}")
    r = y_future.value / y_present.value
    se = r * math.hypot(y_future.se / y_future.value, y_present.se / y_present.value)
    return RatioResult(site_id=site_id, ratio=r, se=se)


def ratio_significance(r: RatioResult, alpha: float = 0.05) -> Significance:
    """Two-sided tests of ratio = 1 on the plain scale and on the log scale.

    The log-scale test uses the delta-method SE of log R, ``se / R``.
    """
    if r.se < 0:
        raise DomainError(f"{r.site_id}: standard error must be non-negative")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    plain = abs(r.ratio - 1.0) > z * r.se
    log = abs(math.log(r.ratio)) > z * r.se / r.ratio
    return Significance(plain=bool(plain), log=bool(log))


def flag_unstable_ratios(results: Sequence[RatioResult], factor: float = UNSTABLE_SE_FACTOR) -> List[RatioResult]:
    """Mark ratios whose SE exceeds ``factor`` times the median SE; nothing is dropped."""
    if not results:
        return []
    cutoff = factor * float(np.median([r.se for r in results]))
    flagged = [replace(r, flagged=r.se > cutoff) for r in results]
    n = sum(r.flagged for r in flagged)
    if n:
        logger.warning("%d of %d ratio standard errors exceed %.3g", n, len(results), cutoff)
    return flagged


RATIO_COLUMNS = ["site_id", "ratio", "se", "sig_plain", "sig_log", "flagged"]


def ratios_frame(results: Sequence[RatioResult], alpha: float = 0.05) -> pd.DataFrame:
    rows = []
    for r in results:
        sig = ratio_significance(r, alpha)
        rows.append([r.site_id, r.ratio, r.se, int(sig.plain), int(sig.log), int(r.flagged)])
    return pd.DataFrame(rows, columns=RATIO_COLUMNS)


DENSITY_COLUMNS = ["cell_id", "site_id", "source", "level", "density"]


def density_comparison(
    cell_id: str,
    cell_params: GevParams,
    station_params: Mapping[str, GevParams],
    n_points: int = 60,
    n: float = 100,
) -> pd.DataFrame:
    """GEV densities of a grid cell and its stations on one shared level grid.

    The grid runs from the lowest ``mu - 2 psi`` to the highest ``n``-year
    return level among the fitted distributions.
    """
    if n_points < 2:
        raise PreconditionError(f"need at least two levels, got {n_points}")
    fitted = [(cell_id, "grid", cell_params)] + [
        (site_id, "station", params) for site_id, params in sorted(station_params.items())
    ]
    low = min(p.mu - 2.0 * p.psi for _, _, p in fitted)
    high = max(return_level(p, n) for _, _, p in fitted)
    levels = np.linspace(low, high, n_points)
    rows = [
        [cell_id, site_id, source, level, gev_pdf(params, level)]
        for site_id, source, params in fitted
        for level in levels
    ]
    return pd.DataFrame(rows, columns=DENSITY_COLUMNS)
