"""Great-circle distances, empirical variograms and universal kriging."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg as spl

from .errors import InsufficientDataError, PreconditionError, SingularSystemError

logger = logging.getLogger(__name__)

EARTH_RADIUS_MILES = 3958.8
# 155 miles is the 250 km mid-level correlation range for daily precipitation.
DEFAULT_RANGE_MILES = 155.0
DEFAULT_MAX_LAG_MILES = 600.0
DEFAULT_N_BINS = 30
# Targets this close to an observation are treated as the same site.
SAME_SITE_MILES = 1e-10


def great_circle_miles(p1: Tuple[float, float], p2: Tuple[float, float]) -> np.ndarray:
    """Haversine distance in miles between (lat, lon) points given in degrees.

    Either point may hold arrays; numpy broadcasting applies.
    """
    lat1, lon1 = (np.radians(np.asarray(v, dtype=float)) for v in p1)
    lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in p2)
    a = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_MILES * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return d if d.ndim else float(d)


def distance_matrix(
    lats: np.ndarray,
    lons: np.ndarray,
    other_lats: Optional[np.ndarray] = None,
    other_lons: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pairwise great-circle miles between two site sets (or one set with itself)."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    if other_lats is None:
        other_lats, other_lons = lats, lons
    other_lats = np.asarray(other_lats, dtype=float)
    other_lons = np.asarray(other_lons, dtype=float)
    return great_circle_miles((lats[:, None], lons[:, None]), (other_lats[None, :], other_lons[None, :]))


@dataclass
class Variogram:
    """Binned empirical semivariogram; empty bins carry NaN and a zero count."""

    edges: np.ndarray
    mean_distance: np.ndarray
    semivariance: np.ndarray
    pairs: np.ndarray

    @property
    def bin_centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "bin_center_miles": self.bin_centers,
                "semivariance": self.semivariance,
                "pairs": self.pairs,
                "mean_distance_miles": self.mean_distance,
            }
        )


def empirical_variogram(
    residuals: Sequence[float],
    lats: Sequence[float],
    lons: Sequence[float],
    max_lag_miles: float = DEFAULT_MAX_LAG_MILES,
    n_bins: int = DEFAULT_N_BINS,
) -> Variogram:
    """Semivariance of residual differences by great-circle distance.

    Pairs up to ``max_lag_miles`` (inclusive) fall into ``n_bins``
    equal-width bins; a pair exactly at the maximum lag joins the last bin.
    """
    r = np.asarray(residuals, dtype=float)
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    if r.size < 2:
        raise InsufficientDataError(f"a variogram needs at least 2 points, got {r.size}")
    if not r.size == lats.size == lons.size:
        raise PreconditionError("residuals and locations differ in length")
    width = max_lag_miles / n_bins
    counts = np.zeros(n_bins, dtype=np.int64)
    sq_sums = np.zeros(n_bins)
    dist_sums = np.zeros(n_bins)
    # One row at a time keeps memory linear in the number of sites.
    for i in range(r.size - 1):
        d = great_circle_miles((lats[i], lons[i]), (lats[i + 1:], lons[i + 1:]))
        keep = d <= max_lag_miles
        if not keep.any():
            continue
        d = d[keep]
        sq = (r[i] - r[i + 1:][keep]) ** 2
        bins = np.minimum((d / width).astype(int), n_bins - 1)
        counts += np.bincount(bins, minlength=n_bins)
        sq_sums += np.bincount(bins, weights=sq, minlength=n_bins)
        dist_sums += np.bincount(bins, weights=d, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sq_sums / (2.0 * counts), np.nan)
        mean_d = np.where(counts > 0, dist_sums / counts, np.nan)
    return Variogram(
        edges=np.linspace(0.0, max_lag_miles, n_bins + 1),
        mean_distance=mean_d,
        semivariance=gamma,
        pairs=counts,
    )


@dataclass(frozen=True)
class KrigingModel:
    """Exponential covariance ``sigma2 exp(-h / range) + nugget 1{h = 0}``."""

    sigma2: float
    range_miles: float = DEFAULT_RANGE_MILES
    nugget: float = 0.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise PreconditionError(f"sill must be positive, got {self.sigma2}")
        if not self.range_miles > 0:
            raise PreconditionError(f"range must be positive, got {self.range_miles}")
        if self.nugget < 0:
            raise PreconditionError(f"nugget must be non-negative, got {self.nugget}")

    def covariance(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return self.sigma2 * np.exp(-h / self.range_miles) + self.nugget * (h == 0)


@dataclass
class KrigingResult:
    """Kriging predictions, standard errors and weights (targets x observations)."""

    prediction: np.ndarray
    se: np.ndarray
    weights: np.ndarray


TRENDS = ("linear", "constant")


def trend_matrix(
    lats: np.ndarray, lons: np.ndarray, elevs: Optional[np.ndarray], trend: str = "linear"
) -> np.ndarray:
    """Trend covariates: a constant, plus lat, lon and (if given) elevation."""
    if trend not in TRENDS:
        raise PreconditionError(f"unknown trend {trend!r}; expected one of {', '.join(TRENDS)}")
    lats = np.asarray(lats, dtype=float)
    cols = [np.ones_like(lats)]
    if trend == "linear":
        cols += [lats, np.asarray(lons, dtype=float)]
        if elevs is not None:
            cols.append(np.asarray(elevs, dtype=float))
    return np.column_stack(cols)


def fit_kriging_model(
    values: Sequence[float],
    lats: Sequence[float],
    lons: Sequence[float],
    elevs: Optional[Sequence[float]] = None,
    range_miles: float = DEFAULT_RANGE_MILES,
    nugget: float = 0.0,
    trend: str = "linear",
) -> KrigingModel:
    """Kriging model whose sill is the residual variance of the trend regression."""
    z = np.asarray(values, dtype=float)
    F = trend_matrix(lats, lons, elevs, trend)
    if z.size <= F.shape[1]:
        raise InsufficientDataError(f"need more than {F.shape[1]} observations to estimate the sill")
    beta, _, _, _ = np.linalg.lstsq(F, z, rcond=None)
    resid = z - F @ beta
    sigma2 = float(resid @ resid) / (z.size - F.shape[1])
    return KrigingModel(sigma2=sigma2, range_miles=range_miles, nugget=nugget)


def _duplicate_sites(lats: np.ndarray, lons: np.ndarray) -> list:
    seen: Dict[Tuple[float, float], int] = {}
    dups = []
    for i, key in enumerate(zip(lats.tolist(), lons.tolist())):
        if key in seen:
            dups.append((seen[key], i))
        else:
            seen[key] = i
    return dups


def universal_krige(
    values: Sequence[float],
    lats: Sequence[float],
    lons: Sequence[float],
    target_lats: Sequence[float],
    target_lons: Sequence[float],
    model: KrigingModel,
    elevs: Optional[Sequence[float]] = None,
    target_elevs: Optional[Sequence[float]] = None,
    trend: str = "linear",
) -> KrigingResult:
    """Best linear unbiased predictions with an unknown linear trend.

    Solves the bordered system ``[[C, F], [F', 0]] [w; m] = [c0; f0]`` once
    per call, sharing one LU factorization across targets. With zero nugget
    the predictor reproduces the observations at observation sites.

    Raises:
        SingularSystemError: duplicate observation sites or a singular system
    """
    z = np.asarray(values, dtype=float)
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    t_lats = np.atleast_1d(np.asarray(target_lats, dtype=float))
    t_lons = np.atleast_1d(np.asarray(target_lons, dtype=float))
    if (elevs is None) != (target_elevs is None):
        raise PreconditionError("give elevations for both observations and targets, or for neither")

    dups = _duplicate_sites(lats, lons)
    if dups:
        raise SingularSystemError(f"kriging system is singular: duplicate sites {dups}", duplicates=dups)

    F = trend_matrix(lats, lons, elevs, trend)
    F0 = trend_matrix(t_lats, t_lons, target_elevs, trend)
    # Standardized trend columns span the same space and condition the system.
    shift = F[:, 1:].mean(axis=0)
    scale = F[:, 1:].std(axis=0)
    scale[scale == 0] = 1.0
    F[:, 1:] = (F[:, 1:] - shift) / scale
    F0[:, 1:] = (F0[:, 1:] - shift) / scale

    n, p = F.shape
    # Work with correlations; variances are rescaled by the sill at the end.
    rel_nugget = model.nugget / model.sigma2
    d = distance_matrix(lats, lons)
    A = np.zeros((n + p, n + p))
    A[:n, :n] = model.covariance(d) / model.sigma2
    A[:n, n:] = F
    A[n:, :n] = F.T

    d0 = distance_matrix(lats, lons, t_lats, t_lons)
    rhs = np.vstack([model.covariance(d0) / model.sigma2, F0.T])
    try:
        lu = spl.lu_factor(A, check_finite=True)
        sol = spl.lu_solve(lu, rhs)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SingularSystemError(f"kriging system could not be solved: {e}") from e
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("kriging system is numerically singular")

    weights = sol[:n].T
    var = model.sigma2 * (1.0 + rel_nugget - np.einsum("ij,ij->j", rhs, sol))
    if model.nugget == 0:
        # Targets on an observation site take its value exactly.
        hit_target, hit_obs = np.nonzero(d0.T <= SAME_SITE_MILES)
        weights[hit_target] = 0.0
        weights[hit_target, hit_obs] = 1.0
        var[hit_target] = 0.0
    if np.any(var < -1e-8 * model.sigma2):
        logger.warning("kriging variance below zero at %d targets; clamped", int(np.sum(var < 0)))
    return KrigingResult(prediction=weights @ z, se=np.sqrt(np.maximum(var, 0.0)), weights=weights)


def compare_predictions(
    kriged: Sequence[float],
    modeled: Sequence[float],
    site_ids: Optional[Sequence[str]] = None,
) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """Kriged-to-modeled ratios per site plus 5/50/95% quantiles.

    Sites with a non-positive modeled value are flagged and left out of the
    summary.
    """
    k = np.asarray(kriged, dtype=float)
    m = np.asarray(modeled, dtype=float)
    if k.shape != m.shape:
        raise PreconditionError("kriged and modeled predictions differ in length")
    if site_ids is None:
        site_ids = [str(i) for i in range(k.size)]
    excluded = ~(m > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(excluded, np.nan, k / m)
    frame = pd.DataFrame(
        {"site_id": list(site_ids), "kriged": k, "modeled": m, "ratio": ratio, "excluded": excluded}
    )
    valid = ratio[~excluded]
    if valid.size:
        q05, q50, q95 = np.quantile(valid, [0.05, 0.5, 0.95])
    else:
        q05 = q50 = q95 = math.nan
    summary = {"n": int(valid.size), "n_excluded": int(excluded.sum()),
               "q05": float(q05), "median": float(q50), "q95": float(q95)}
    return frame, summary
