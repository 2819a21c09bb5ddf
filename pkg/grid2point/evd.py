"""GEV distribution, point-process intensity and likelihood, return levels."""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DomainError, InvalidCovarianceError, InvalidParamsError, PreconditionError

# Below this |xi| every formula switches to its Gumbel limit.
XI_EPS = 1e-6

# Quadratic forms down to this value are treated as rounding noise.
QUAD_FORM_TOL = -1e-12


@dataclass(frozen=True)
class GevParams:
    """Location, scale and shape of a GEV distribution.

    Levels (mu, psi) are in tenths of a millimeter; xi is dimensionless.
    """

    mu: float
    psi: float
    xi: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.mu, self.psi, self.xi)):
            raise InvalidParamsError(f"GEV parameters must be finite: {self}")
        if self.psi <= 0:
            raise InvalidParamsError(f"GEV scale must be positive, got psi={self.psi}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.psi, self.xi], dtype=float)


@dataclass(frozen=True)
class ReturnLevel:
    """An n-year return level and its delta-method standard error."""

    value: float
    se: float
    n: float

    def __post_init__(self):
        if self.se < 0:
            raise DomainError(f"standard error must be non-negative, got {self.se}")
        if self.n < 2:
            raise DomainError(f"return period must be at least 2 years, got {self.n}")


def _is_gumbel(xi: float) -> bool:
    return abs(xi) < XI_EPS


def _check_period(n: float) -> float:
    if not n >= 2:
        raise PreconditionError(f"return period must be at least 2 years, got {n}")
    return float(n)


def gev_cdf(p: GevParams, y: float) -> float:
    """Probability that a GEV variable does not exceed ``y``.

    Outside the support the result is 0 (below the lower endpoint when xi > 0)
    or 1 (above the upper endpoint when xi < 0).
    """
    if not math.isfinite(y):
        raise DomainError(f"level must be finite, got {y}")
    z = (y - p.mu) / p.psi
    if _is_gumbel(p.xi):
        return math.exp(-math.exp(-z))
    t = 1.0 + p.xi * z
    if t <= 0:
        return 0.0 if p.xi > 0 else 1.0
    return math.exp(-math.exp(-math.log(t) / p.xi))


def gev_pdf(p: GevParams, y: float) -> float:
    """GEV density at ``y``; 0 outside the support."""
    if not math.isfinite(y):
        raise DomainError(f"level must be finite, got {y}")
    z = (y - p.mu) / p.psi
    if _is_gumbel(p.xi):
        return math.exp(-z - math.exp(-z)) / p.psi
    t = 1.0 + p.xi * z
    if t <= 0:
        return 0.0
    log_t = math.log(t)
    return math.exp(-(1.0 / p.xi + 1.0) * log_t - math.exp(-log_t / p.xi)) / p.psi


def return_level(p: GevParams, n: float) -> float:
    """Level ``y_n`` with ``gev_cdf(p, y_n) == exp(-1/n)``."""
    n = _check_period(n)
    log_n = math.log(n)
    if _is_gumbel(p.xi):
        return p.mu + p.psi * log_n
    return p.mu + p.psi * math.expm1(p.xi * log_n) / p.xi


def return_level_gradient(p: GevParams, n: float) -> Tuple[float, float, float]:
    """Partial derivatives of :func:`return_level` in (mu, psi, xi)."""
    n = _check_period(n)
    log_n = math.log(n)
    if _is_gumbel(p.xi):
        return 1.0, log_n, p.psi * log_n ** 2 / 2.0
    n_xi_m1 = math.expm1(p.xi * log_n)
    d_psi = n_xi_m1 / p.xi
    d_xi = p.psi * (p.xi * (n_xi_m1 + 1.0) * log_n - n_xi_m1) / p.xi ** 2
    return 1.0, d_psi, d_xi


def pp_intensity(p: GevParams, y: float) -> float:
    """Point-process intensity in the level direction at ``y``."""
    z = (y - p.mu) / p.psi
    if _is_gumbel(p.xi):
        return math.exp(-z) / p.psi
    t = 1.0 + p.xi * z
    if t <= 0:
        return 0.0
    return math.exp(-(1.0 / p.xi + 1.0) * math.log(t)) / p.psi


def pp_tail_measure(p: GevParams, u: float) -> float:
    """Expected number of exceedances of ``u`` per season-year.

    Equals the integral of :func:`pp_intensity` over ``(u, inf)``. Returns
    ``inf`` when ``u`` lies below a finite lower endpoint (xi > 0) and 0 above
    a finite upper endpoint (xi < 0).
    """
    z = (u - p.mu) / p.psi
    if _is_gumbel(p.xi):
        return math.exp(-z)
    t = 1.0 + p.xi * z
    if t <= 0:
        return math.inf if p.xi > 0 else 0.0
    return math.exp(-math.log(t) / p.xi)


def pp_neg_log_likelihood(p: GevParams, peaks: Sequence[float], u: float, T: float) -> float:
    """Negative log-likelihood of the threshold point process.

    Args:
        p: GEV parameters
        peaks: Cluster peaks, all strictly above ``u``
        u: Threshold
        T: Observed period in season-years

    Returns:
        The negative log-likelihood, or ``inf`` when ``u`` or any peak lies
        outside the support of ``p``.
    """
    y = np.asarray(peaks, dtype=float)
    if T <= 0:
        raise PreconditionError(f"observation period must be positive, got T={T}")
    if y.size and not np.all(y > u):
        raise PreconditionError(f"every peak must exceed the threshold u={u}")
    return _nll(p.mu, p.psi, p.xi, y, u, T)


def _nll(mu: float, psi: float, xi: float, y: np.ndarray, u: float, T: float) -> float:
    # Unchecked core shared with the optimizer.
    n = y.size
    zu = (u - mu) / psi
    zy = (y - mu) / psi
    if _is_gumbel(xi):
        return n * math.log(psi) + float(zy.sum()) + T * math.exp(-zu)
    tu = 1.0 + xi * zu
    ty = xi * zy
    if tu <= 0 or (n and ty.min() <= -1.0):
        return math.inf
    log_ty = np.log1p(ty)
    return (
        n * math.log(psi)
        + (1.0 / xi + 1.0) * float(log_ty.sum())
        + T * math.exp(-math.log1p(xi * zu) / xi)
    )


def delta_method_se(grad: Sequence[float], cov: np.ndarray) -> float:
    """Standard error ``sqrt(grad' cov grad)`` of a smooth function of the estimates."""
    g = np.asarray(grad, dtype=float)
    c = np.asarray(cov, dtype=float)
    if c.shape != (g.size, g.size):
        raise InvalidCovarianceError(f"covariance shape {c.shape} does not match gradient length {g.size}")
    if not np.allclose(c, c.T, rtol=1e-8, atol=1e-12):
        raise InvalidCovarianceError("covariance matrix is not symmetric")
    q = float(g @ c @ g)
    if not math.isfinite(q) or q < QUAD_FORM_TOL:
        raise InvalidCovarianceError(f"quadratic form is negative ({q:.3g})")
    return math.sqrt(max(q, 0.0))
