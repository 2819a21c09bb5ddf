"""Maximum-likelihood fitting of the threshold point process.

Parameters are optimized in (mu, log psi, xi) with a Nelder-Mead simplex and
reported in (mu, psi, xi). The covariance is the inverse of the numerical
Hessian of the negative log-likelihood at the optimum (observed information).
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg as spl
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import DegenerateError, InsufficientDataError, PreconditionError
from .evd import GevParams, ReturnLevel, _nll, delta_method_se, return_level, return_level_gradient
from .preprocess import DEFAULT_MISSING_CUTOFF, DailySeries, SeasonalExceedances, YearRange, build_exceedances

logger = logging.getLogger(__name__)

MIN_PEAKS = 10
XI_SEED = 0.05
XI_BOUNDS = (-0.95, 2.0)
# Relative spread of simplex function values that counts as converged.
CONVERGENCE_RTOL = 1e-8
MAX_EVALS = 4000
HESSIAN_REL_STEP = 1e-4


@dataclass
class FitResult:
    """Outcome of one point-process fit.

    ``params`` holds the best point found even when the fit failed; ``cov``
    is NaN-filled unless the Hessian could be inverted.
    """

    params: Optional[GevParams]
    cov: np.ndarray
    converged: bool
    n_peaks: int
    threshold: float
    T: float
    neg_loglik: float
    message: str = ""
    n_evals: int = 0

    @property
    def param_ses(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diag(self.cov))


@dataclass
class ShapeTest:
    """One-sided z test of xi = 0."""

    z: float
    reject: bool
    side: str
    alpha: float


def initial_params(peaks: Sequence[float], u: float, T: float) -> GevParams:
    """Gumbel-moment starting point for the optimizer.

    Under the Gumbel intensity the mean excess over ``u`` is psi and the
    expected count over ``T`` season-years is ``T * exp(-(u - mu) / psi)``.
    """
    y = np.asarray(peaks, dtype=float)
    if y.size < MIN_PEAKS:
        raise InsufficientDataError(f"need at least {MIN_PEAKS} peaks to fit, got {y.size}")
    if T <= 0:
        raise PreconditionError(f"observation period must be positive, got T={T}")
    psi0 = float(np.mean(y - u))
    mu0 = u + psi0 * math.log(y.size / T)
    return GevParams(mu0, psi0, XI_SEED)


def numerical_hessian(f: Callable[[np.ndarray], float], x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central-difference Hessian of ``f`` at ``x``."""
    k = x.size
    h = np.zeros((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = steps[i]
        h[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = steps[j]
            h[i, j] = h[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
    return h


def _failed(params, peaks, u, T, nll, message, n_evals=0) -> FitResult:
    logger.debug("fit failed: %s", message)
    return FitResult(
        params=params,
        cov=np.full((3, 3), np.nan),
        converged=False,
        n_peaks=int(len(peaks)),
        threshold=float(u),
        T=float(T),
        neg_loglik=float(nll),
        message=message,
        n_evals=n_evals,
    )


def _initial_simplex(x0: np.ndarray, psi: float) -> np.ndarray:
    steps = np.array([0.1 * psi, 0.1, 0.05])
    return np.vstack([x0, x0 + np.diag(steps)])


def _simplex_spread(fsim: np.ndarray) -> float:
    best = float(np.min(fsim))
    return float(np.max(fsim) - best) / max(1.0, abs(best))


def fit_point_process(peaks: Sequence[float], u: float, T: float, max_evals: int = MAX_EVALS) -> FitResult:
    """Maximum-likelihood GEV parameters from peaks over ``u`` observed for ``T`` season-years.

    Args:
        peaks: Cluster peaks, all above ``u``
        u: Threshold
        T: Observed period in season-years
        max_evals: Likelihood evaluation budget per simplex run

    Returns:
        A :class:`FitResult`; failures are reported through ``converged`` and
        ``message`` rather than raised.
    """
    y = np.asarray(peaks, dtype=float)
    if y.size and not np.all(y > u):
        raise PreconditionError(f"every peak must exceed the threshold u={u}")
    seed = initial_params(y, u, T)
    if np.ptp(y) == 0:
        return _failed(None, y, u, T, math.inf, "degenerate likelihood: all peaks equal")

    lo, hi = XI_BOUNDS

    def objective(theta: np.ndarray) -> float:
        mu, log_psi, xi = theta
        if not lo <= xi <= hi or not math.isfinite(log_psi):
            return math.inf
        return _nll(mu, math.exp(log_psi), xi, y, u, T)

    x0 = np.array([seed.mu, math.log(seed.psi), seed.xi])
    f_seed = objective(x0)
    if not math.isfinite(f_seed):
        return _failed(None, y, u, T, f_seed, "starting point outside the support")

    n_evals = 0
    res = None
    x_start = x0
    # One restart from the incumbent guards against a collapsed simplex.
    for _ in range(2):
        options = {
            "initial_simplex": _initial_simplex(x_start, math.exp(x_start[1])),
            "xatol": 1e-7,
            "fatol": 1e-10 * max(1.0, abs(f_seed)),
            "maxfev": max_evals,
            "maxiter": max_evals,
        }
        res = minimize(objective, x_start, method="Nelder-Mead", options=options)
        n_evals += int(res.nfev)
        x_start = res.x

    mu, log_psi, xi = (float(v) for v in res.x)
    nll = float(res.fun)
    params = GevParams(mu, math.exp(log_psi), xi)
    spread = _simplex_spread(res.final_simplex[1])
    if not math.isfinite(nll):
        return _failed(params, y, u, T, nll, "no finite likelihood found", n_evals)
    if spread >= CONVERGENCE_RTOL:
        return _failed(params, y, u, T, nll, f"simplex did not converge ({res.message})", n_evals)
    if min(xi - lo, hi - xi) < 1e-4:
        return _failed(params, y, u, T, nll, f"shape parameter at bound (xi={xi:.4f})", n_evals)

    x_hat = params.as_array()
    steps = HESSIAN_REL_STEP * np.maximum(1.0, np.abs(x_hat))
    if x_hat[1] - steps[1] <= 0:
        return _failed(params, y, u, T, nll, "scale too small for the Hessian stencil", n_evals)

    def nll_original(x: np.ndarray) -> float:
        return _nll(x[0], x[1], x[2], y, u, T)

    hess = numerical_hessian(nll_original, x_hat, steps)
    if not np.all(np.isfinite(hess)):
        return _failed(params, y, u, T, nll, "Hessian touches the support boundary", n_evals)
    try:
        chol = spl.cho_factor(hess)
        cov = spl.cho_solve(chol, np.eye(3))
    except np.linalg.LinAlgError:
        return _failed(params, y, u, T, nll, "Hessian is not positive definite", n_evals)
    cov = (cov + cov.T) / 2.0
    if not np.all(np.diag(cov) > 0) or not np.all(np.isfinite(cov)):
        return _failed(params, y, u, T, nll, "covariance has non-positive variances", n_evals)

    return FitResult(
        params=params,
        cov=cov,
        converged=True,
        n_peaks=int(y.size),
        threshold=float(u),
        T=float(T),
        neg_loglik=nll,
        message="converged",
        n_evals=n_evals,
    )


def return_level_with_se(fit: FitResult, n: float = 100) -> ReturnLevel:
    """n-year return level of a converged fit with its delta-method SE."""
    if not fit.converged or fit.params is None:
        raise PreconditionError(f"return level needs a converged fit ({fit.message or 'not converged'})")
    value = return_level(fit.params, n)
    se = delta_method_se(return_level_gradient(fit.params, n), fit.cov)
    return ReturnLevel(value=value, se=se, n=n)


def xi_test(fit: FitResult, side: str = "right", alpha: float = 0.05) -> ShapeTest:
    """One-sided test of xi = 0 against xi > 0 (``right``) or xi < 0 (``left``)."""
    if not fit.converged or fit.params is None:
        raise PreconditionError("shape test needs a converged fit")
    if side not in ("right", "left"):
        raise PreconditionError(f"side must be 'right' or 'left', got {side!r}")
    se = math.sqrt(fit.cov[2, 2])
    if se == 0:
        raise DegenerateError("standard error of xi is zero")
    z = fit.params.xi / se
    z_crit = float(norm.ppf(1.0 - alpha))
    reject = z > z_crit if side == "right" else z < -z_crit
    return ShapeTest(z=z, reject=bool(reject), side=side, alpha=alpha)


def summarize_shape(fits: Iterable[FitResult], alpha: float = 0.05) -> Dict[str, float]:
    """Mean shape estimate, share positive and one-sided rejection rates over converged fits."""
    converged = [f for f in fits if f.converged and f.params is not None and f.cov[2, 2] > 0]
    if not converged:
        return {"n": 0, "mean_xi": math.nan, "frac_positive": math.nan,
                "frac_reject_right": math.nan, "frac_reject_left": math.nan}
    xis = np.array([f.params.xi for f in converged])
    right = np.mean([xi_test(f, "right", alpha).reject for f in converged])
    left = np.mean([xi_test(f, "left", alpha).reject for f in converged])
    return {
        "n": len(converged),
        "mean_xi": float(xis.mean()),
        "frac_positive": float(np.mean(xis > 0)),
        "frac_reject_right": float(right),
        "frac_reject_left": float(left),
    }


def fit_exceedances(exc: SeasonalExceedances) -> FitResult:
    """Fit the point process to prepared exceedances."""
    return fit_point_process(exc.peaks, exc.threshold, exc.T)


def fit_series(
    series: DailySeries,
    season: str,
    year_range: YearRange,
    percentile: float = 0.95,
    eps: float = DEFAULT_MISSING_CUTOFF,
    decluster: bool = True,
) -> Tuple[SeasonalExceedances, FitResult]:
    """Preprocess one daily series and fit it.

    Raises the preprocessing errors (missing cutoff, too few observations or
    peaks); an optimizer failure comes back as an unconverged fit.
    """
    exc = build_exceedances(series, season, year_range, percentile, eps, decluster)
    return exc, fit_exceedances(exc)


STABILITY_COLUMNS = [
    "percentile", "threshold", "n_peaks", "mu", "psi", "xi", "return_level", "se", "failed",
    "d_mu", "d_psi", "d_xi", "d_return_level",
]


def threshold_stability(
    series: DailySeries,
    season: str,
    year_range: YearRange,
    percentiles: Sequence[float] = (0.95, 0.97),
    n: float = 100,
    eps: float = DEFAULT_MISSING_CUTOFF,
    decluster: bool = True,
) -> pd.DataFrame:
    """Fit the same series at several percentile thresholds and compare.

    Deltas are taken against the first percentile's row and are NaN when
    either fit failed.
    """
    rows: List[Dict[str, float]] = []
    for p in percentiles:
        row: Dict[str, float] = {"percentile": p}
        try:
            exc, fit = fit_series(series, season, year_range, p, eps, decluster)
            row.update(threshold=exc.threshold, n_peaks=exc.peaks.size)
        except InsufficientDataError as e:
            logger.info("%s at %.2f: %s", series.site_id, p, e)
            fit = None
            row.update(threshold=math.nan, n_peaks=0)
        if fit is not None and fit.converged:
            rl = return_level_with_se(fit, n)
            row.update(mu=fit.params.mu, psi=fit.params.psi, xi=fit.params.xi,
                       return_level=rl.value, se=rl.se, failed=False)
        else:
            row.update(mu=math.nan, psi=math.nan, xi=math.nan,
                       return_level=math.nan, se=math.nan, failed=True)
        rows.append(row)

    base = rows[0]
    for row in rows:
        for key in ("mu", "psi", "xi", "return_level"):
            row[f"d_{key}"] = row[key] - base[key]
    return pd.DataFrame(rows, columns=STABILITY_COLUMNS)
