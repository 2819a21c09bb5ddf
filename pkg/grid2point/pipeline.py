"""End-to-end run: load, fit, pair, regress, krige, ratios and reports.

Every table is sorted by id and written with a fixed float format, and the
only randomness (the kriging holdout) is drawn from the configured seed, so
a rerun with the same config reproduces the outputs byte for byte.
"""
import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import PipelineConfig
from .data_io import load_grid_data, load_station_data, write_table
from .errors import (
    ExcessiveMissingError,
    InsufficientDataError,
    NoCellError,
    PipelineStageError,
    SingularDesignError,
)
from .evd import GevParams, ReturnLevel
from .fitting import FitResult, fit_series, return_level_with_se, summarize_shape, threshold_stability
from .preprocess import DailySeries, YearRange
from .regression import (
    DesignSpec,
    GridDefinition,
    PairedRecord,
    RegressionFit,
    assign_station_to_cell,
    coefficient_table,
    default_candidates,
    fit_records,
    predict_many,
    select_model,
)
from .render import render_map
from .scenario import (
    TripleConfig,
    density_comparison,
    flag_unstable_ratios,
    future_present_ratio,
    ratios_frame,
    select_triple_cells,
    summarize_triples,
    triple_comparison,
    triples_frame,
)
from .spatial import compare_predictions, empirical_variogram, fit_kriging_model, universal_krige

logger = logging.getLogger(__name__)

STAGES = ("fit-stations", "fit-grid", "regress", "krige", "ratio", "report")

EXCLUSION_CATEGORIES = ("missing", "insufficient_data", "fit_failed", "no_cell")
EXCLUSION_COLUMNS = ["site_id", "category", "detail"]
RETURN_COLUMNS = [
    "site_id", "lat_deg", "lon_deg", "elev_m", "threshold", "n_peaks", "T",
    "mu", "psi", "xi", "se_mu", "se_psi", "se_xi", "return_level", "se", "converged",
]
PREDICTION_COLUMNS = ["site_id", "cell_id", "observed", "predicted", "se", "residual"]


@dataclass(frozen=True)
class FitSettings:
    season: str
    year_range: YearRange
    percentile: float
    eps: float
    decluster: bool
    return_period: float


@dataclass
class SiteOutcome:
    """Preprocessing and fit result for one station or cell."""

    site_id: str
    lat: float
    lon: float
    elev: Optional[float]
    threshold: float = math.nan
    n_peaks: int = 0
    T: float = math.nan
    fit: Optional[FitResult] = None
    level: Optional[ReturnLevel] = None
    category: Optional[str] = None
    detail: str = ""

    @property
    def usable(self) -> bool:
        return self.level is not None


@dataclass
class PipelineResult:
    config: PipelineConfig
    stages: List[str]
    outputs: Dict[str, Path]
    manifest: Dict[str, Any]
    stations: List[SiteOutcome] = field(default_factory=list)
    cells: List[SiteOutcome] = field(default_factory=list)
    records: List[PairedRecord] = field(default_factory=list)
    regression: Optional[RegressionFit] = None


def fit_settings(cfg: PipelineConfig, percentile: Optional[float] = None) -> FitSettings:
    return FitSettings(
        season=cfg.season, year_range=cfg.year_range,
        percentile=cfg.percentile if percentile is None else percentile,
        eps=cfg.missing_cutoff, decluster=cfg.decluster, return_period=cfg.return_period,
    )


def fit_site(series: DailySeries, settings: FitSettings) -> SiteOutcome:
    """Preprocess and fit one series, classifying any exclusion."""
    out = SiteOutcome(series.site_id, series.lat, series.lon, series.elev)
    try:
        exc, fit = fit_series(
            series, settings.season, settings.year_range, settings.percentile, settings.eps, settings.decluster
        )
    except ExcessiveMissingError as e:
        out.category, out.detail = "missing", str(e)
        return out
    except InsufficientDataError as e:
        out.category, out.detail = "insufficient_data", str(e)
        return out
    out.threshold, out.n_peaks, out.T, out.fit = exc.threshold, int(exc.peaks.size), exc.T, fit
    if not fit.converged:
        out.category, out.detail = "fit_failed", fit.message
        return out
    try:
        out.level = return_level_with_se(fit, settings.return_period)
    except ValueError as e:
        out.category, out.detail = "fit_failed", str(e)
    return out


def fit_sites(series: Sequence[DailySeries], settings: FitSettings, workers: int = 1) -> List[SiteOutcome]:
    """Fit every series; results come back in site-id order whatever ``workers`` is."""
    ordered = sorted(series, key=lambda s: s.site_id)
    fn = partial(fit_site, settings=settings)
    if workers > 1 and len(ordered) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, ordered, chunksize=max(1, len(ordered) // (4 * workers))))
    return [fn(s) for s in ordered]


def returns_frame(outcomes: Sequence[SiteOutcome]) -> pd.DataFrame:
    rows = []
    for o in outcomes:
        if o.fit is None:
            continue
        p, ses = o.fit.params, o.fit.param_ses
        rows.append([
            o.site_id, o.lat, o.lon, math.nan if o.elev is None else o.elev, o.threshold, o.n_peaks, o.T,
            p.mu if p else math.nan, p.psi if p else math.nan, p.xi if p else math.nan,
            ses[0], ses[1], ses[2],
            o.level.value if o.level else math.nan, o.level.se if o.level else math.nan,
            int(o.usable),
        ])
    return pd.DataFrame(rows, columns=RETURN_COLUMNS)


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


class PipelineRun:
    """State carried between stages of one run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.output_dir)
        self.outputs: Dict[str, Path] = {}
        self.manifest: Dict[str, Any] = {"config": cfg.as_dict(), "stages": []}
        self.settings = fit_settings(cfg)
        self.series: Dict[str, DailySeries] = {}
        self.cell_series: Dict[str, DailySeries] = {}
        self.stations: List[SiteOutcome] = []
        self.cells: List[SiteOutcome] = []
        self.exclusions: Dict[str, Tuple[str, str]] = {}
        self.records: List[PairedRecord] = []
        self.regression: Optional[RegressionFit] = None

    def write(self, name: str, frame: pd.DataFrame) -> None:
        self.outputs[name] = write_table(frame, self.out_dir / name)

    def exclude(self, site_id: str, category: str, detail: str) -> None:
        if site_id not in self.exclusions:
            self.exclusions[site_id] = (category, detail)

    def write_exclusions(self) -> None:
        frame = pd.DataFrame(
            [[sid, cat, detail] for sid, (cat, detail) in sorted(self.exclusions.items())],
            columns=EXCLUSION_COLUMNS,
        )
        self.write("exclusions.csv", frame)
        counts = Counter(cat for cat, _ in self.exclusions.values())
        self.manifest["exclusions"] = {c: counts.get(c, 0) for c in EXCLUSION_CATEGORIES}

    # Stages

    def fit_stations(self) -> None:
        cfg = self.cfg
        loaded, report = load_station_data(cfg.stations_path, cfg.daily_path)
        self.manifest["load"] = report.as_dict()
        if not loaded:
            raise PipelineStageError("load", f"no station series in {cfg.daily_path}")
        self.series = {s.site_id: s for s in loaded}

        self.stations = fit_sites(loaded, self.settings, cfg.workers)
        for o in self.stations:
            if o.category:
                self.exclude(o.site_id, o.category, o.detail)
        preprocessed = [o for o in self.stations if o.fit is not None]
        usable = [o for o in self.stations if o.usable]
        n_failed = sum(o.category == "fit_failed" for o in self.stations)
        self.manifest["counts"] = {
            "stations_loaded": len(loaded),
            "stations_preprocessed": len(preprocessed),
            "stations_fitted": len(usable),
        }
        self.manifest["failed_fits"] = {
            "count": n_failed,
            "rate": n_failed / len(preprocessed) if preprocessed else math.nan,
        }
        self.write_exclusions()
        if not preprocessed:
            raise PipelineStageError(
                "preprocess", f"all {len(loaded)} stations excluded: {self.manifest['exclusions']}"
            )
        if not usable:
            raise PipelineStageError("fit-stations", f"no station fit converged ({n_failed} failed)")
        self.write("station_returns.csv", returns_frame(self.stations))
        self.manifest["shape"] = {"stations": summarize_shape([o.fit for o in usable], cfg.alpha)}
        logger.info("fitted %d of %d stations", len(usable), len(loaded))

    def fit_grid(self) -> None:
        cfg = self.cfg
        loaded = load_grid_data(cfg.grid_path)
        if not loaded:
            raise PipelineStageError("load", f"no grid cells in {cfg.grid_path}")
        self.cell_series = {c.site_id: c for c in loaded}
        self.cells = fit_sites(loaded, self.settings, cfg.workers)
        usable = [o for o in self.cells if o.usable]
        self.manifest["counts"].update(cells_loaded=len(loaded), cells_fitted=len(usable))
        self.manifest["cell_exclusions"] = dict(Counter(o.category for o in self.cells if o.category))
        if not usable:
            raise PipelineStageError("fit-grid", "no grid cell fit converged")
        self.write("cell_returns.csv", returns_frame(self.cells))
        self.manifest["shape"]["cells"] = summarize_shape([o.fit for o in usable], cfg.alpha)

    def pair(self) -> None:
        grid = GridDefinition(
            spacing=self.cfg.grid_spacing,
            centers={c.site_id: (c.lat, c.lon) for c in self.cell_series.values()},
        )
        cell_levels = {o.site_id: o.level.value for o in self.cells if o.usable}
        records = []
        for o in self.stations:
            if not o.usable:
                continue
            try:
                cid = assign_station_to_cell(o.lat, o.lon, grid)
            except NoCellError as e:
                self.exclude(o.site_id, "no_cell", str(e))
                continue
            if cid not in cell_levels:
                self.exclude(o.site_id, "no_cell", f"grid cell {cid} has no return level")
                continue
            elev = 0.0 if o.elev is None else o.elev
            records.append(PairedRecord(o.site_id, cid, o.level.value, cell_levels[cid], elev, o.lat, o.lon))
        self.write_exclusions()
        if not records:
            raise PipelineStageError("regress", "no station could be paired with a fitted grid cell")
        self.records = records
        self.manifest["counts"]["paired"] = len(records)

    def regress(self) -> None:
        cfg = self.cfg
        self.pair()
        try:
            best = select_model(self.records, default_candidates())
            if cfg.auto_select:
                fit = best
            else:
                fit = fit_records(self.records, DesignSpec(latlon_degree=cfg.degree))
        except (SingularDesignError, InsufficientDataError) as e:
            raise PipelineStageError("regress", str(e)) from e
        table = best.aic_table.copy()
        table["selected"] = (table["degree"] == fit.spec.latlon_degree).astype(int)
        table = self._with_log_grid_row(table, fit.spec)
        self.regression = fit

        self.write("coefficients.csv", coefficient_table(fit, cfg.season, cfg.percentile))
        self.write("aic.csv", table)
        level, se = self._predict(fit, self.records)
        self.write("predictions.csv", pd.DataFrame({
            "site_id": [r.station_id for r in self.records],
            "cell_id": [r.cell_id for r in self.records],
            "observed": [r.y_point for r in self.records],
            "predicted": level,
            "se": se,
            "residual": fit.residuals,
        }, columns=PREDICTION_COLUMNS))
        self.manifest["regression"] = {
            "model": fit.spec.label, "degree": fit.spec.latlon_degree, "n": fit.n, "k": fit.k,
            "aic": fit.aic, "sigma2": fit.sigma2, "auto_selected": cfg.auto_select,
        }

        lats = np.array([r.lat for r in self.records])
        lons = np.array([r.lon for r in self.records])
        if len(self.records) >= 2:
            vg = empirical_variogram(fit.residuals, lats, lons, cfg.variogram_max_lag, cfg.variogram_bins)
            self.write("variogram.csv", vg.to_frame())
        east = lons > cfg.east_split_lon
        if east.sum() >= 2:
            vg = empirical_variogram(fit.residuals[east], lats[east], lons[east],
                                     cfg.variogram_max_lag, cfg.variogram_bins)
            self.write("variogram_east.csv", vg.to_frame())

    def _with_log_grid_row(self, table: pd.DataFrame, spec: DesignSpec) -> pd.DataFrame:
        """Append the log-log model at the chosen degree to the AIC table."""
        log_spec = DesignSpec(spec.include_grid, spec.include_elev, spec.latlon_degree, log_grid=True)
        try:
            log_fit = fit_records(self.records, log_spec)
        except (SingularDesignError, InsufficientDataError) as e:
            logger.warning("skipping %s: %s", log_spec.label, e)
            self.manifest["transform_comparison"] = {"skipped": str(e)}
            return table
        row = {
            "degree": log_spec.latlon_degree, "model": log_spec.label, "k": log_fit.k, "rss": log_fit.rss,
            "aic": math.nan if log_fit.aic is None else log_fit.aic, "selected": 0,
        }
        chosen = table.loc[table["selected"] == 1, "aic"]
        self.manifest["transform_comparison"] = {
            "model": log_spec.label,
            "aic": row["aic"],
            "aic_difference": row["aic"] - chosen.iloc[0] if len(chosen) else math.nan,
        }
        return pd.concat([table, pd.DataFrame([row], columns=table.columns)], ignore_index=True)

    @staticmethod
    def _predict(fit: RegressionFit, records: Sequence[PairedRecord]):
        return predict_many(
            fit,
            np.array([r.x_grid for r in records]),
            np.array([r.elev for r in records]),
            np.array([r.lat for r in records]),
            np.array([r.lon for r in records]),
        )

    def _unused_targets(self) -> List[PairedRecord]:
        """Stations left out of the fit that sit in a fitted cell; their level is unknown."""
        grid = GridDefinition(
            spacing=self.cfg.grid_spacing,
            centers={c.site_id: (c.lat, c.lon) for c in self.cell_series.values()},
        )
        cell_levels = {o.site_id: o.level.value for o in self.cells if o.usable}
        targets = []
        for o in self.stations:
            if o.usable or o.category == "no_cell":
                continue
            try:
                cid = assign_station_to_cell(o.lat, o.lon, grid)
            except NoCellError:
                continue
            if cid in cell_levels:
                elev = 0.0 if o.elev is None else o.elev
                # y_point is a placeholder; unused stations have no return level.
                targets.append(PairedRecord(o.site_id, cid, 1.0, cell_levels[cid], elev, o.lat, o.lon))
        return targets

    def krige(self) -> None:
        cfg = self.cfg
        targets = self._unused_targets()
        observed = self.records
        model_fit = self.regression
        mode = "unused_sites"
        if not targets:
            n_hold = max(1, int(round(cfg.holdout_fraction * len(self.records))))
            if len(self.records) - n_hold <= model_fit.k:
                logger.warning("too few paired stations for a kriging holdout; kriging skipped")
                self.manifest["kriging"] = {"skipped": "too few paired stations for a holdout"}
                return
            rng = np.random.default_rng(cfg.seed)
            held = set(rng.choice(len(self.records), size=n_hold, replace=False).tolist())
            targets = [r for i, r in enumerate(self.records) if i in held]
            observed = [r for i, r in enumerate(self.records) if i not in held]
            mode = "holdout"
            try:
                model_fit = fit_records(observed, model_fit.spec)
            except SingularDesignError as e:
                raise PipelineStageError("krige", f"holdout regression is singular: {e}") from e

        seen = set()
        obs = []
        for r in observed:
            if (r.lat, r.lon) in seen:
                logger.warning("%s shares its location with another station; left out of kriging", r.station_id)
                continue
            seen.add((r.lat, r.lon))
            obs.append(r)
        values = np.array([r.y_point for r in obs])
        lats, lons = np.array([r.lat for r in obs]), np.array([r.lon for r in obs])
        elevs = np.array([r.elev for r in obs])
        try:
            model = fit_kriging_model(values, lats, lons, elevs, cfg.range_miles, cfg.nugget)
        except (InsufficientDataError, ValueError) as e:
            raise PipelineStageError("krige", str(e)) from e
        result = universal_krige(
            values, lats, lons,
            [t.lat for t in targets], [t.lon for t in targets], model,
            elevs=elevs, target_elevs=[t.elev for t in targets],
        )
        ids = [t.station_id for t in targets]
        self.write("kriging.csv", pd.DataFrame({"site_id": ids, "prediction": result.prediction, "se": result.se}))
        modeled, _ = self._predict(model_fit, targets)
        frame, summary = compare_predictions(result.prediction, modeled, ids)
        frame["excluded"] = frame["excluded"].astype(int)
        self.write("krige_compare.csv", frame)
        self.manifest["kriging"] = dict(summary, mode=mode, sigma2=model.sigma2, range_miles=model.range_miles,
                                        nugget=model.nugget, n_observations=len(obs))

    def ratio(self) -> None:
        cfg = self.cfg
        path = cfg.future_grid_path
        if path is None:
            logger.info("no future grid configured; ratio stage skipped")
            return
        future = fit_sites(load_grid_data(path), self.settings, cfg.workers)
        self.write("future_cell_returns.csv", returns_frame(future))
        present_levels = {o.site_id: o.level for o in self.cells if o.usable}
        future_levels = {o.site_id: o.level for o in future if o.usable}
        both = sorted(present_levels.keys() & future_levels.keys())
        if not both:
            raise PipelineStageError("ratio", "no cell has both a present and a future return level")
        cell_results = flag_unstable_ratios(
            [future_present_ratio(future_levels[c], present_levels[c], c) for c in both]
        )
        self.write("cell_ratios.csv", ratios_frame(cell_results, cfg.alpha))

        # Paired stations and unused stations alike carry their present cell level as x_grid.
        targets = sorted(
            (t for t in self.records + self._unused_targets() if t.cell_id in future_levels),
            key=lambda t: t.station_id,
        )
        if not targets:
            raise PipelineStageError("ratio", "no station sits in a cell with a future return level")
        present_y, present_se = self._predict(self.regression, targets)
        future_y, future_se = self._predict(
            self.regression, [replace(t, x_grid=future_levels[t.cell_id].value) for t in targets]
        )
        n = cfg.return_period
        results = flag_unstable_ratios([
            future_present_ratio(ReturnLevel(fy, fse, n), ReturnLevel(py, pse, n), t.station_id)
            for t, fy, fse, py, pse in zip(targets, future_y, future_se, present_y, present_se)
        ])
        self.write("ratios.csv", ratios_frame(results, cfg.alpha))
        ses = np.array([r.se for r in results])
        self.manifest["ratio"] = {
            "n": len(results),
            "n_unused_stations": len(targets) - sum(t.cell_id in future_levels for t in self.records),
            "n_flagged": sum(r.flagged for r in results),
            "median_ratio": float(np.median([r.ratio for r in results])),
            "se_q95": float(np.quantile(ses, 0.95)),
            "n_cells": len(cell_results),
            "median_cell_ratio": float(np.median([r.ratio for r in cell_results])),
        }

    def triples(self) -> None:
        cfg = self.cfg
        counts = Counter(r.cell_id for r in self.records)
        cells = select_triple_cells(counts, cfg.triple_min_stations)
        if not cells:
            note = f"no cell has more than {cfg.triple_min_stations} stations"
            logger.info("triple comparison skipped: %s", note)
            self.manifest["triples"] = {"skipped": note}
            return
        tcfg = TripleConfig(cfg.season, cfg.year_range, cfg.percentile, cfg.return_period,
                            cfg.missing_cutoff, cfg.decluster)
        rows = []
        for cid in cells:
            members = [self.series[r.station_id] for r in self.records if r.cell_id == cid]
            rows.append(triple_comparison(cid, members, self.cell_series[cid], tcfg))
        self.write("triples.csv", triples_frame(rows))
        self.manifest["triples"] = summarize_triples(rows)

    def densities(self) -> None:
        cells = {o.site_id: o for o in self.cells if o.usable}
        stations = {o.site_id: o for o in self.stations if o.usable}
        members: Dict[str, Dict[str, GevParams]] = {}
        for r in self.records:
            members.setdefault(r.cell_id, {})[r.station_id] = stations[r.station_id].fit.params
        frames = [
            density_comparison(cid, cells[cid].fit.params, members[cid], n=self.cfg.return_period)
            for cid in sorted(members)
        ]
        if frames:
            self.write("densities.csv", pd.concat(frames, ignore_index=True))

    def stability(self) -> None:
        cfg = self.cfg
        frames = []
        for r in self.records:
            frame = threshold_stability(
                self.series[r.station_id], cfg.season, cfg.year_range,
                (cfg.percentile, cfg.stability_percentile), cfg.return_period,
                cfg.missing_cutoff, cfg.decluster,
            )
            frame.insert(0, "site_id", r.station_id)
            frames.append(frame)
        table = pd.concat(frames, ignore_index=True)
        table["failed"] = table["failed"].astype(int)
        self.write("stability.csv", table)

    def maps(self) -> None:
        for name, outcomes in (("station_returns.svg", self.stations), ("cell_returns.svg", self.cells)):
            usable = [o for o in outcomes if o.usable]
            if usable:
                self.outputs[name] = render_map(
                    [o.level.value for o in usable], [o.lat for o in usable], [o.lon for o in usable],
                    self.out_dir / name,
                    title=f"{self.cfg.return_period:g}-year {self.cfg.season} return level (0.1 mm)",
                )

    def finish(self) -> Dict[str, Any]:
        self.manifest["outputs"] = sorted(self.outputs)
        path = self.out_dir / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_clean(self.manifest), sort_keys=True, indent=2) + "\n")
        self.outputs["manifest.json"] = path
        return self.manifest


def run_pipeline(cfg: PipelineConfig, through: str = "report") -> PipelineResult:
    """Run every stage up to and including ``through``.

    Raises:
        PipelineStageError: a stage had no usable input
    """
    if through not in STAGES:
        raise PipelineStageError("setup", f"unknown stage {through!r}; expected one of {', '.join(STAGES)}")
    cfg.validate()
    run = PipelineRun(cfg)
    last = STAGES.index(through)

    def want(stage: str) -> bool:
        return STAGES.index(stage) <= last

    steps = [
        ("fit-stations", run.fit_stations),
        ("fit-grid", run.fit_grid),
        ("regress", run.regress),
        ("krige", run.krige if cfg.krige else None),
        ("ratio", run.ratio),
        ("report", run.triples),
        ("report", run.densities),
        ("report", run.stability if cfg.stability else None),
        ("report", run.maps),
    ]
    for stage, step in steps:
        if not want(stage) or step is None:
            continue
        logger.info("stage %s: %s", stage, step.__name__)
        step()
        if stage not in run.manifest["stages"]:
            run.manifest["stages"].append(stage)
    manifest = run.finish()
    return PipelineResult(
        config=cfg, stages=list(run.manifest["stages"]), outputs=run.outputs, manifest=manifest,
        stations=run.stations, cells=run.cells, records=run.records, regression=run.regression,
    )
