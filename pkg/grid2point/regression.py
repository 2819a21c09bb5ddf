"""Regression of log point return levels on grid return levels and location.

The design is an intercept, the grid return level, elevation and the full
polynomial in centered latitude and longitude up to a chosen degree.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg as spl

from .errors import InsufficientDataError, NoCellError, PerfectFitError, PreconditionError, SingularDesignError

logger = logging.getLogger(__name__)

MAX_DEGREE = 4
# Columns of R with |R_ii| below this fraction of max |R_jj| count as dependent.
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class PairedRecord:
    """A station return level matched with its grid cell's return level."""

    station_id: str
    cell_id: str
    y_point: float
    x_grid: float
    elev: float
    lat: float
    lon: float

    def __post_init__(self):
        if not self.y_point > 0:
            raise PreconditionError(f"{self.station_id}: point return level must be positive")


@dataclass(frozen=True)
class DesignSpec:
    """Which covariates enter the design.

    Attributes:
        include_grid: Grid return level column
        include_elev: Elevation column
        latlon_degree: Maximum total degree of lat/lon monomials (0-4)
        log_grid: Use the log of the grid return level instead of the level
    """

    include_grid: bool = True
    include_elev: bool = True
    latlon_degree: int = 3
    log_grid: bool = False

    def __post_init__(self):
        if not 0 <= self.latlon_degree <= MAX_DEGREE:
            raise PreconditionError(f"lat/lon degree must be in 0..{MAX_DEGREE}, got {self.latlon_degree}")

    @property
    def label(self) -> str:
        parts = ["log(grid)" if self.log_grid else "grid"] if self.include_grid else []
        if self.include_elev:
            parts.append("elev")
        if self.latlon_degree:
            parts.append(f"latlon^{self.latlon_degree}")
        return " + ".join(parts) or "intercept"


@dataclass
class Design:
    """Design matrix, log response and the centering used for lat/lon."""

    X: np.ndarray
    y: np.ndarray
    terms: List[str]
    center: Tuple[float, float]


@dataclass
class RegressionFit:
    """Least-squares fit of log point return levels.

    ``aic`` is None for a perfect fit (zero residual sum of squares).
    """

    spec: DesignSpec
    coeffs: np.ndarray
    coeff_ses: np.ndarray
    residuals: np.ndarray
    rss: float
    n: int
    k: int
    aic: Optional[float]
    sigma2: float
    terms: List[str]
    center: Tuple[float, float]
    xtx_inv: np.ndarray
    aic_table: Optional[pd.DataFrame] = field(default=None, repr=False)

    @classmethod
    def from_coefficients(
        cls,
        spec: DesignSpec,
        coeffs: Sequence[float],
        center: Tuple[float, float] = (0.0, 0.0),
        coeff_ses: Optional[Sequence[float]] = None,
        sigma2: float = 0.0,
    ) -> "RegressionFit":
        """Prediction-only fit from published coefficients."""
        terms = design_terms(spec)
        beta = np.asarray(coeffs, dtype=float)
        if beta.size != len(terms):
            raise PreconditionError(f"{spec.label} has {len(terms)} terms, got {beta.size} coefficients")
        ses = np.full(beta.size, np.nan) if coeff_ses is None else np.asarray(coeff_ses, dtype=float)
        return cls(
            spec=spec, coeffs=beta, coeff_ses=ses, residuals=np.zeros(0), rss=math.nan,
            n=0, k=beta.size, aic=None, sigma2=sigma2, terms=terms, center=center,
            xtx_inv=np.zeros((beta.size, beta.size)),
        )


@dataclass
class GridDefinition:
    """Regular lat/lon grid given by its populated cell centers."""

    spacing: float
    centers: Dict[str, Tuple[float, float]]
    lat_centers: np.ndarray = field(init=False, repr=False)
    lon_centers: np.ndarray = field(init=False, repr=False)
    by_center: Dict[Tuple[float, float], str] = field(init=False, repr=False)

    def __post_init__(self):
        self.lat_centers = np.unique([c[0] for c in self.centers.values()])
        self.lon_centers = np.unique([c[1] for c in self.centers.values()])
        self.by_center = {(lat, lon): cid for cid, (lat, lon) in self.centers.items()}

    @classmethod
    def regular(cls, lat0: float, lon0: float, spacing: float, n_lat: int, n_lon: int) -> "GridDefinition":
        centers = {
            f"{i}_{j}": (lat0 + i * spacing, lon0 + j * spacing)
            for i in range(n_lat)
            for j in range(n_lon)
        }
        return cls(spacing=spacing, centers=centers)


def _nearest_axis_index(axis: np.ndarray, value: float, half: float) -> Optional[int]:
    dist = np.abs(axis - value)
    i = int(np.argmin(dist))  # argmin returns the first (smaller-index) tie
    if dist[i] > half + 1e-9:
        return None
    return i


def assign_station_to_cell(lat: float, lon: float, grid: GridDefinition) -> str:
    """Id of the grid cell containing (lat, lon).

    A cell spans its center plus or minus half the spacing on each axis; a
    location on a shared boundary goes to the cell with the smaller index.
    """
    half = grid.spacing / 2.0
    i = _nearest_axis_index(grid.lat_centers, lat, half)
    j = _nearest_axis_index(grid.lon_centers, lon, half)
    if i is None or j is None:
        raise NoCellError(f"({lat}, {lon}) lies outside the grid")
    cell = grid.by_center.get((grid.lat_centers[i], grid.lon_centers[j]))
    if cell is None:
        raise NoCellError(f"({lat}, {lon}) falls in an unpopulated grid cell")
    return cell


def latlon_monomials(degree: int) -> List[Tuple[int, int]]:
    """Exponent pairs (a, b) of lat^a * lon^b with 1 <= a + b <= degree."""
    return [(a, d - a) for d in range(1, degree + 1) for a in range(d, -1, -1)]


def design_terms(spec: DesignSpec) -> List[str]:
    terms = ["intercept"]
    if spec.include_grid:
        terms.append("log_grid" if spec.log_grid else "grid")
    if spec.include_elev:
        terms.append("elev")
    for a, b in latlon_monomials(spec.latlon_degree):
        lat = "" if a == 0 else ("lat" if a == 1 else f"lat^{a}")
        lon = "" if b == 0 else ("lon" if b == 1 else f"lon^{b}")
        terms.append("*".join(t for t in (lat, lon) if t))
    return terms


def _design_rows(
    spec: DesignSpec,
    x_grid: np.ndarray,
    elev: np.ndarray,
    lat: np.ndarray,
    lon: np.ndarray,
    center: Tuple[float, float],
) -> np.ndarray:
    cols = [np.ones_like(lat, dtype=float)]
    if spec.include_grid:
        cols.append(np.log(x_grid) if spec.log_grid else x_grid)
    if spec.include_elev:
        cols.append(elev)
    dlat = lat - center[0]
    dlon = lon - center[1]
    for a, b in latlon_monomials(spec.latlon_degree):
        cols.append(dlat ** a * dlon ** b)
    return np.column_stack([np.asarray(c, dtype=float) for c in cols])


def _record_arrays(records: Sequence[PairedRecord]) -> Dict[str, np.ndarray]:
    return {
        name: np.array([getattr(r, name) for r in records], dtype=float)
        for name in ("y_point", "x_grid", "elev", "lat", "lon")
    }


def build_design(
    records: Sequence[PairedRecord],
    spec: DesignSpec,
    center: Optional[Tuple[float, float]] = None,
) -> Design:
    """Design matrix and log response for ``records``.

    Latitude and longitude are centered at their sample means unless
    ``center`` is given.
    """
    if not records:
        raise InsufficientDataError("no paired records to build a design from")
    a = _record_arrays(records)
    if center is None:
        center = (float(a["lat"].mean()), float(a["lon"].mean()))
    X = _design_rows(spec, a["x_grid"], a["elev"], a["lat"], a["lon"], center)
    return Design(X=X, y=np.log(a["y_point"]), terms=design_terms(spec), center=center)


def aic(fit: RegressionFit) -> float:
    """Akaike's criterion ``n ln(RSS/n) + 2(k + 1)``, counting the noise variance."""
    if not fit.rss > 0:
        raise PerfectFitError("AIC is undefined for a zero residual sum of squares")
    return fit.n * math.log(fit.rss / fit.n) + 2.0 * (fit.k + 1)


def fit_ols(
    X: np.ndarray,
    y: np.ndarray,
    spec: Optional[DesignSpec] = None,
    terms: Optional[List[str]] = None,
    center: Tuple[float, float] = (0.0, 0.0),
) -> RegressionFit:
    """Least squares by QR decomposition.

    Coefficient standard errors come from ``sigma2 (X'X)^-1`` and assume
    independent errors.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise PreconditionError(f"design shape {X.shape} does not match response length {y.size}")
    n, k = X.shape
    if n <= k:
        raise InsufficientDataError(f"need more observations than columns ({n} <= {k})")
    Q, R = spl.qr(X, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.min() <= RANK_RTOL * diag.max():
        raise SingularDesignError(f"design with {k} columns is rank deficient")
    beta = spl.solve_triangular(R, Q.T @ y)
    residuals = y - X @ beta
    rss = float(residuals @ residuals)
    sigma2 = rss / (n - k)
    r_inv = spl.solve_triangular(R, np.eye(k))
    xtx_inv = r_inv @ r_inv.T
    ses = np.sqrt(sigma2 * np.diag(xtx_inv))
    if spec is None:
        spec = DesignSpec(include_grid=False, include_elev=False, latlon_degree=0)
    if terms is None:
        terms = [f"x{i}" for i in range(k)]
    fit = RegressionFit(
        spec=spec, coeffs=beta, coeff_ses=ses, residuals=residuals, rss=rss, n=n, k=k,
        aic=None, sigma2=sigma2, terms=terms, center=center, xtx_inv=xtx_inv,
    )
    if rss > 0:
        fit.aic = aic(fit)
    return fit


def fit_records(records: Sequence[PairedRecord], spec: DesignSpec) -> RegressionFit:
    """Build the design for ``spec`` and fit it."""
    design = build_design(records, spec)
    return fit_ols(design.X, design.y, spec=spec, terms=design.terms, center=design.center)


def default_candidates(include_grid: bool = True, include_elev: bool = True) -> List[DesignSpec]:
    return [DesignSpec(include_grid, include_elev, d) for d in range(MAX_DEGREE + 1)]


AIC_COLUMNS = ["degree", "model", "k", "rss", "aic", "selected"]


def select_model(
    records: Sequence[PairedRecord],
    candidates: Optional[Sequence[DesignSpec]] = None,
) -> RegressionFit:
    """Fit every candidate and return the one with the smallest AIC.

    The winner carries the full comparison in ``aic_table``. Singular
    candidates are skipped; ties go to the earlier candidate.
    """
    candidates = list(candidates) if candidates is not None else default_candidates()
    if not candidates:
        raise PreconditionError("no candidate models given")
    fits: List[Tuple[DesignSpec, Optional[RegressionFit]]] = []
    for spec in candidates:
        try:
            fits.append((spec, fit_records(records, spec)))
        except (SingularDesignError, InsufficientDataError) as e:
            logger.warning("skipping %s: %s", spec.label, e)
            fits.append((spec, None))
    usable = [f for _, f in fits if f is not None]
    if not usable:
        raise SingularDesignError("every candidate model is singular")
    if len(usable) == 1:
        best = usable[0]
    else:
        scored = [f for f in usable if f.aic is not None]
        if not scored:
            raise PerfectFitError("every candidate fits perfectly; AIC is undefined")
        best = min(scored, key=lambda f: f.aic)
    best.aic_table = pd.DataFrame(
        [
            {
                "degree": spec.latlon_degree,
                "model": spec.label,
                "k": f.k if f else math.nan,
                "rss": f.rss if f else math.nan,
                "aic": f.aic if f and f.aic is not None else math.nan,
                "selected": f is best,
            }
            for spec, f in fits
        ],
        columns=AIC_COLUMNS,
    )
    return best


def predict_point_return(
    fit: RegressionFit, x_grid: float, elev: float, lat: float, lon: float
) -> Tuple[float, float]:
    """Predicted point return level and its delta-method standard error.

    The log-scale prediction variance includes the residual variance, and the
    level is the plain exponential of the log-scale prediction.
    """
    level, se = predict_many(fit, np.array([x_grid]), np.array([elev]), np.array([lat]), np.array([lon]))
    return float(level[0]), float(se[0])


def predict_many(
    fit: RegressionFit,
    x_grid: np.ndarray,
    elev: np.ndarray,
    lat: np.ndarray,
    lon: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`predict_point_return`."""
    rows = _design_rows(
        fit.spec,
        np.asarray(x_grid, dtype=float),
        np.asarray(elev, dtype=float),
        np.asarray(lat, dtype=float),
        np.asarray(lon, dtype=float),
        fit.center,
    )
    eta = rows @ fit.coeffs
    v = fit.sigma2 * (1.0 + np.einsum("ij,jk,ik->i", rows, fit.xtx_inv, rows))
    level = np.exp(eta)
    return level, level * np.sqrt(np.maximum(v, 0.0))


COEFFICIENT_COLUMNS = ["season", "percentile", "term", "estimate", "SE"]


def coefficient_table(fit: RegressionFit, season: str, percentile: float) -> pd.DataFrame:
    """Coefficients in the season / percentile / term / estimate / SE layout."""
    return pd.DataFrame(
        {
            "season": season,
            "percentile": percentile,
            "term": fit.terms,
            "estimate": fit.coeffs,
            "SE": fit.coeff_ses,
        },
        columns=COEFFICIENT_COLUMNS,
    )
