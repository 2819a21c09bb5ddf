"""Pipeline configuration.

Values are resolved from, lowest to highest precedence: the dataclass
defaults, the ``DATA_DIR`` environment variable, a flat ``key=value`` file
and command-line overrides.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .errors import ConfigError
from .preprocess import SEASONS
from .regression import MAX_DEGREE

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "DATA_DIR"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    season: str = "DJF"
    percentile: float = 0.95
    return_period: float = 100.0
    missing_cutoff: float = 0.1
    first_year: int = 1950
    last_year: int = 1999
    grid_spacing: float = 2.5
    degree: int = 3
    auto_select: bool = False
    range_miles: float = 155.0
    nugget: float = 0.0
    alpha: float = 0.05
    variogram_max_lag: float = 600.0
    variogram_bins: int = 30
    east_split_lon: float = -100.0
    triple_min_stations: int = 65
    holdout_fraction: float = 0.1
    decluster: bool = True
    krige: bool = True
    stability: bool = False
    stability_percentile: float = 0.97
    workers: int = 1
    seed: int = 0
    data_dir: str = "data"
    output_dir: str = "outputs"
    stations_file: str = "stations.csv"
    daily_file: str = "daily.csv"
    grid_file: str = "grid_daily.csv"
    future_grid_file: Optional[str] = None

    def validate(self) -> "PipelineConfig":
        """Raise :class:`ConfigError` on the first invalid setting."""
        checks = [
            (self.season in SEASONS, f"season must be one of {', '.join(SEASONS)}"),
            (0.90 <= self.percentile <= 0.99, "percentile must lie in [0.90, 0.99]"),
            (0 < self.missing_cutoff <= 0.5, "missing_cutoff must lie in (0, 0.5]"),
            (0 <= self.degree <= MAX_DEGREE, f"degree must lie in 0..{MAX_DEGREE}"),
            (self.return_period >= 2, "return_period must be at least 2"),
            (self.first_year <= self.last_year, "first_year must not exceed last_year"),
            (self.grid_spacing > 0, "grid_spacing must be positive"),
            (self.range_miles > 0, "range_miles must be positive"),
            (self.nugget >= 0, "nugget must be non-negative"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.variogram_max_lag > 0 and self.variogram_bins >= 1, "variogram lag and bins must be positive"),
            (0 < self.holdout_fraction < 1, "holdout_fraction must lie in (0, 1)"),
            (not self.stability or self.percentile < self.stability_percentile < 1,
             "stability_percentile must exceed percentile"),
            (self.workers >= 1, "workers must be at least 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    @property
    def year_range(self):
        return (self.first_year, self.last_year)

    def data_path(self, name: str) -> Path:
        return Path(self.data_dir) / name

    @property
    def stations_path(self) -> Path:
        return self.data_path(self.stations_file)

    @property
    def daily_path(self) -> Path:
        return self.data_path(self.daily_file)

    @property
    def grid_path(self) -> Path:
        return self.data_path(self.grid_file)

    @property
    def future_grid_path(self) -> Optional[Path]:
        return self.data_path(self.future_grid_file) if self.future_grid_file else None

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce(key: str, text: str) -> Any:
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None
    if default is None and text.lower() in ("", "none"):
        return None
    return text


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """Resolve a validated config from env, optional file and overrides.

    ``None`` entries in ``overrides`` are ignored so unset CLI flags fall
    through to lower layers.
    """
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    if environ.get(DATA_DIR_ENV):
        values["data_dir"] = environ[DATA_DIR_ENV]
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown setting {key!r}")
        if value is not None:
            values[key] = value
    cfg = PipelineConfig(**values).validate()
    logger.debug("resolved config: %s", cfg)
    return cfg


def write_config(cfg: PipelineConfig, path: Union[str, Path]) -> Path:
    """Write ``cfg`` in the ``key=value`` format :func:`load_config` reads."""
    path = Path(path)
    lines = []
    for key, value in cfg.as_dict().items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path
