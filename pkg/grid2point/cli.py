"""Command-line interface for grid2point."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .config import load_config
from .data_io import write_grid_data, write_station_data
from .errors import ConfigError
from .evd import GevParams
from .pipeline import run_pipeline
from .preprocess import SEASONS
from .synth import NetworkConfig, simulate_network

SUBCOMMAND_STAGES = {
    "fit-stations": "fit-stations",
    "fit-grid": "fit-grid",
    "regress": "regress",
    "krige": "krige",
    "ratio": "ratio",
    "report": "report",
}

# CLI flag destinations that map one-to-one onto PipelineConfig keys.
CONFIG_FLAGS = (
    "season", "percentile", "return_period", "missing_cutoff", "degree", "range_miles", "seed",
    "auto_select", "data_dir", "output_dir", "workers", "future_grid_file", "stability", "decluster",
)


def _analysis_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', type=str, default=None,
                        help='key=value config file (CLI flags override it)')
    common.add_argument('--data-dir', type=str, default=None,
                        help='Directory holding stations.csv, daily.csv and grid_daily.csv (or set DATA_DIR)')
    common.add_argument('--output-dir', '-d', type=str, default=None, help='Output directory. Default: outputs')
    common.add_argument('--season', '-s', type=str, choices=SEASONS, default=None, help='Season. Default: DJF')
    common.add_argument('--percentile', '-p', type=float, default=None,
                        help='Threshold percentile in [0.90, 0.99]. Default: 0.95')
    common.add_argument('--return-period', '-n', type=float, default=None, help='Return period in years. Default: 100')
    common.add_argument('--missing-cutoff', type=float, default=None,
                        help='Largest allowed fraction of missing days. Default: 0.1')
    common.add_argument('--degree', type=int, default=None, help='Lat/lon polynomial degree 0-4. Default: 3')
    common.add_argument('--auto-select', action='store_true', default=None,
                        help='Pick the lat/lon degree by AIC instead of --degree')
    common.add_argument('--range-miles', type=float, default=None, help='Kriging range in miles. Default: 155')
    common.add_argument('--seed', type=int, default=None, help='Seed for the kriging holdout. Default: 0')
    common.add_argument('--future-grid', dest='future_grid_file', type=str, default=None,
                        help='Future-climate grid file (inside the data directory) for the ratio stage')
    common.add_argument('--stability', action='store_true', default=None,
                        help='Also refit at a second threshold percentile and write stability.csv')
    common.add_argument('--all-exceedances', dest='decluster', action='store_false', default=None,
                        help='Treat every exceedance as a peak instead of declustering runs')
    common.add_argument('--workers', '-j', type=int, default=None, help='Processes for per-site fits. Default: 1')
    common.add_argument('--verbose', '-v', action='store_true', help='Enable verbose output')
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grid2point",
        description="Relate gridded precipitation return levels to station return levels",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Write a small synthetic dataset to data/
  grid2point simulate --data-dir data

  # Fit winter station return levels only
  grid2point fit-stations --data-dir data --season DJF

  # Regression with the lat/lon degree chosen by AIC
  grid2point regress --data-dir data --auto-select

  # Everything, including future/present ratios
  grid2point report --data-dir data --future-grid future_grid_daily.csv
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _analysis_flags()

    sim = sub.add_parser('simulate', help='Write a synthetic station and grid dataset')
    sim.add_argument('--data-dir', type=str, default='data', help='Where to write the CSV files. Default: data')
    sim.add_argument('--season', '-s', type=str, choices=SEASONS, default='DJF')
    sim.add_argument('--n-lat', type=int, default=2, help='Grid rows. Default: 2')
    sim.add_argument('--n-lon', type=int, default=2, help='Grid columns. Default: 2')
    sim.add_argument('--stations-per-cell', type=int, default=12, help='Default: 12')
    sim.add_argument('--years', type=int, default=30, help='Season-years to generate, from 1950. Default: 30')
    sim.add_argument('--missing-rate', type=float, default=0.0, help='Independent missing-day rate. Default: 0')
    sim.add_argument('--future-scale', type=float, default=None,
                     help='Also write future_grid_daily.csv with cell levels scaled by this factor')
    sim.add_argument('--seed', type=int, default=2024, help='Default: 2024')
    sim.add_argument('--verbose', '-v', action='store_true', help='Enable verbose output')

    for name, text in (
        ('fit-stations', 'Fit station return levels'),
        ('fit-grid', 'Fit station and grid-cell return levels'),
        ('regress', 'Regress station on grid return levels'),
        ('krige', 'Krige return levels at unused or held-out stations'),
        ('ratio', 'Future/present ratios of predicted station return levels'),
        ('report', 'Run every stage and write maps and the manifest'),
    ):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _simulate(args) -> int:
    cfg = NetworkConfig(
        n_lat=args.n_lat, n_lon=args.n_lon, stations_per_cell=args.stations_per_cell,
        years=args.years, season=args.season, missing_rate=args.missing_rate,
        future_scale=args.future_scale, seed=args.seed, base=GevParams(500.0, 200.0, 0.1),
    )
    if args.verbose:
        print(f"🎲 Simulating {cfg.n_lat * cfg.n_lon * cfg.stations_per_cell} stations "
              f"in {cfg.n_lat * cfg.n_lon} cells over {cfg.years} years...")
    network = simulate_network(cfg)
    data_dir = Path(args.data_dir)
    write_station_data(network.stations, data_dir / "stations.csv", data_dir / "daily.csv")
    write_grid_data(network.cells, data_dir / "grid_daily.csv")
    if network.future_cells is not None:
        write_grid_data(network.future_cells, data_dir / "future_grid_daily.csv")
    print(f"✨ Synthetic data written to: {data_dir}")
    return 0


def _overrides(args) -> Dict[str, object]:
    return {key: getattr(args, key, None) for key in CONFIG_FLAGS}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        if args.command == 'simulate':
            return _simulate(args)

        cfg = load_config(args.config, _overrides(args))
        if args.command == 'ratio' and cfg.future_grid_file is None:
            raise ConfigError("the ratio command needs --future-grid or future_grid_file in the config")
        if args.verbose:
            print(f"📂 Data: {cfg.data_dir}  →  outputs: {cfg.output_dir}")
        result = run_pipeline(cfg, through=SUBCOMMAND_STAGES[args.command])

        counts = result.manifest.get("counts", {})
        print(f"✓ Stations fitted: {counts.get('stations_fitted', 0)}/{counts.get('stations_loaded', 0)}")
        excluded = result.manifest.get("exclusions", {})
        if any(excluded.values()):
            summary = ", ".join(f"{k}={v}" for k, v in sorted(excluded.items()) if v)
            print(f"⚠️  Excluded stations: {summary}", file=sys.stderr)
        if "regression" in result.manifest:
            reg = result.manifest["regression"]
            print(f"✓ Regression: {reg['model']} on {reg['n']} stations")
        print(f"✨ Outputs saved to: {cfg.output_dir} ({len(result.outputs)} files)")
        return 0
    except (ValueError, RuntimeError, OSError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == '__main__':
    sys.exit(main())
