"""Reading and writing the CSV interchange files.

Station metadata: ``station_id,lat_deg,lon_deg,elev_m``
Station daily:    ``station_id,date,precip_tenths_mm`` (empty or NA = missing)
Grid daily:       ``cell_id,lat_deg,lon_deg,date,precip_tenths_mm``
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InconsistentGridError, PreconditionError
from .preprocess import DailySeries

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STATION_COLUMNS = ["station_id", "lat_deg", "lon_deg", "elev_m"]
DAILY_COLUMNS = ["station_id", "date", "precip_tenths_mm"]
GRID_COLUMNS = ["cell_id", "lat_deg", "lon_deg", "date", "precip_tenths_mm"]

FLOAT_FORMAT = "%.10g"
MISSING_TOKENS = ("", "NA")
REJECT_REASONS = ("unparseable", "negative", "unknown_station", "duplicate")


@dataclass
class LoadReport:
    """Row bookkeeping for one ingestion pass."""

    rows_read: int = 0
    rows_accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    def reject(self, reason: str, count: int = 1) -> None:
        if count:
            self.rejected[reason] += int(count)

    @property
    def n_rejected(self) -> int:
        return sum(self.rejected.values())

    def as_dict(self) -> Dict[str, int]:
        out = {"rows_read": self.rows_read, "rows_accepted": self.rows_accepted}
        out.update({f"rejected_{r}": int(self.rejected.get(r, 0)) for r in REJECT_REASONS})
        return out


def _require_columns(frame: pd.DataFrame, columns: Sequence[str], path: PathLike) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise PreconditionError(f"{path}: missing column(s) {', '.join(missing)}")


def _read_text_table(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    _require_columns(frame, columns, path)
    return frame


def _parse_values(raw: pd.Series) -> Tuple[pd.Series, pd.Series]:
    """Numeric values (NaN for missing tokens) and a mask of unparseable entries."""
    stripped = raw.str.strip()
    missing = stripped.isin(MISSING_TOKENS)
    numbers = pd.to_numeric(stripped.where(~missing), errors="coerce")
    bad = ~missing & numbers.isna()
    return numbers, bad


def _parse_dates(raw: pd.Series) -> pd.Series:
    return pd.to_datetime(raw.str.strip(), format="%Y-%m-%d", errors="coerce")


def _to_series(site_id: str, lat: float, lon: float, elev: Optional[float], rows: pd.DataFrame) -> DailySeries:
    return DailySeries(
        site_id=site_id,
        lat=float(lat),
        lon=float(lon),
        dates=rows["date"].to_numpy(dtype="datetime64[D]"),
        values=rows["value"].to_numpy(dtype=float),
        elev=None if elev is None or pd.isna(elev) else float(elev),
    )


def load_station_data(meta_path: PathLike, daily_path: PathLike) -> Tuple[List[DailySeries], LoadReport]:
    """Join station metadata to daily observations.

    Rows with an unparseable date or value, a negative or fractional value, or
    a station absent from the metadata are rejected and counted. For a repeated
    (station, date) the first row wins.

    Returns:
        Series in station-id order, and the row report
    """
    meta = pd.read_csv(meta_path, dtype={"station_id": str})
    _require_columns(meta, STATION_COLUMNS, meta_path)
    meta["station_id"] = meta["station_id"].str.strip()
    meta = meta.drop_duplicates("station_id").set_index("station_id")

    daily = _read_text_table(daily_path, DAILY_COLUMNS)
    report = LoadReport(rows_read=len(daily))

    values, bad_value = _parse_values(daily["precip_tenths_mm"])
    dates = _parse_dates(daily["date"])
    bad = bad_value | dates.isna() | (values.notna() & (values != np.floor(values)))
    report.reject("unparseable", int(bad.sum()))

    negative = ~bad & (values < 0)
    report.reject("negative", int(negative.sum()))

    station = daily["station_id"].str.strip()
    unknown = ~bad & ~negative & ~station.isin(meta.index)
    report.reject("unknown_station", int(unknown.sum()))

    keep = ~(bad | negative | unknown)
    rows = pd.DataFrame({"station_id": station, "date": dates, "value": values})[keep]
    dup = rows.duplicated(["station_id", "date"], keep="first")
    if dup.any():
        logger.warning("%s: %d duplicate (station, date) rows dropped, first kept", daily_path, int(dup.sum()))
    report.reject("duplicate", int(dup.sum()))
    rows = rows[~dup]
    report.rows_accepted = len(rows)

    if report.n_rejected:
        logger.warning("%s: rejected %d of %d rows %s", daily_path, report.n_rejected, report.rows_read,
                       dict(sorted(report.rejected.items())))

    series = []
    for sid, group in rows.sort_values(["station_id", "date"]).groupby("station_id", sort=True):
        m = meta.loc[sid]
        series.append(_to_series(sid, m["lat_deg"], m["lon_deg"], m["elev_m"], group))
    logger.info("loaded %d stations from %s", len(series), daily_path)
    return series, report


def load_grid_data(path: PathLike) -> List[DailySeries]:
    """One series per grid cell, with gaps in the dates filled as missing days.

    Raises:
        InconsistentGridError: a cell listed with more than one coordinate pair
    """
    frame = _read_text_table(path, GRID_COLUMNS)
    values, bad = _parse_values(frame["precip_tenths_mm"])
    dates = _parse_dates(frame["date"])
    invalid = bad | dates.isna() | (values < 0)
    if invalid.any():
        logger.warning("%s: %d unusable rows treated as absent", path, int(invalid.sum()))
    rows = pd.DataFrame({
        "cell_id": frame["cell_id"].str.strip(),
        "lat": pd.to_numeric(frame["lat_deg"], errors="coerce"),
        "lon": pd.to_numeric(frame["lon_deg"], errors="coerce"),
        "date": dates,
        "value": values,
    })[~invalid]

    cells = []
    for cid, group in rows.groupby("cell_id", sort=True):
        lats, lons = group["lat"].unique(), group["lon"].unique()
        if len(lats) != 1 or len(lons) != 1:
            raise InconsistentGridError(f"cell {cid} has coordinates lat={list(lats)} lon={list(lons)}")
        group = group.drop_duplicates("date", keep="first").set_index("date").sort_index()
        full = pd.date_range(group.index.min(), group.index.max(), freq="D")
        filled = group.reindex(full).rename_axis("date").reset_index()
        cells.append(_to_series(cid, lats[0], lons[0], None, filled))
    logger.info("loaded %d grid cells from %s", len(cells), path)
    return cells


def _iso(dates: np.ndarray) -> np.ndarray:
    return np.datetime_as_string(np.asarray(dates, dtype="datetime64[D]"), unit="D")


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write one output table in the fixed CSV layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_station_data(series: Sequence[DailySeries], meta_path: PathLike, daily_path: PathLike) -> None:
    """Inverse of :func:`load_station_data`."""
    ordered = sorted(series, key=lambda s: s.site_id)
    meta = pd.DataFrame(
        [[s.site_id, s.lat, s.lon, np.nan if s.elev is None else s.elev] for s in ordered],
        columns=STATION_COLUMNS,
    )
    daily = pd.concat(
        [
            pd.DataFrame({"station_id": s.site_id, "date": _iso(s.dates), "precip_tenths_mm": s.values})
            for s in ordered
        ],
        ignore_index=True,
    ) if ordered else pd.DataFrame(columns=DAILY_COLUMNS)
    write_table(meta, meta_path)
    write_table(daily, daily_path)


def write_grid_data(cells: Sequence[DailySeries], path: PathLike) -> None:
    """Inverse of :func:`load_grid_data`."""
    ordered = sorted(cells, key=lambda s: s.site_id)
    frame = pd.concat(
        [
            pd.DataFrame({
                "cell_id": c.site_id, "lat_deg": c.lat, "lon_deg": c.lon,
                "date": _iso(c.dates), "precip_tenths_mm": c.values,
            })
            for c in ordered
        ],
        ignore_index=True,
    ) if ordered else pd.DataFrame(columns=GRID_COLUMNS)
    write_table(frame, path)
