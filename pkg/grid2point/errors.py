"""Exceptions raised by grid2point."""
from typing import List, Optional, Tuple


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class InvalidParamsError(ValueError):
    """GEV parameters violate psi > 0 or are not finite."""


class PreconditionError(ValueError):
    """An operation was called with inputs its contract does not accept."""


class InsufficientDataError(ValueError):
    """Too few observations, peaks or observed days to proceed."""


class ExcessiveMissingError(ValueError):
    """A series has a missing fraction above the cutoff."""

    def __init__(self, message: str, fraction: float):
        super().__init__(message)
        self.fraction = fraction


class InvalidCovarianceError(ValueError):
    """A covariance matrix is asymmetric or not positive semi-definite."""


class DegenerateError(ValueError):
    """A statistic is undefined because a standard error is zero."""


class SingularDesignError(ValueError):
    """A regression design matrix does not have full column rank."""


class PerfectFitError(ValueError):
    """AIC is undefined because the residual sum of squares is zero."""


class NoCellError(ValueError):
    """A location falls outside every grid cell."""


class DegenerateConfigError(ValueError):
    """A simulation configuration implies no exceedances."""


class InconsistentGridError(ValueError):
    """A grid cell is listed with more than one set of coordinates."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range."""


class SingularSystemError(RuntimeError):
    """The kriging system cannot be solved."""

    def __init__(self, message: str, duplicates: Optional[List[Tuple[int, int]]] = None):
        super().__init__(message)
        self.duplicates = duplicates or []


class PipelineStageError(RuntimeError):
    """A pipeline stage has no usable input."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
