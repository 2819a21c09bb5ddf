"""
Tests for config parsing, layering and validation.
"""
import tempfile
from pathlib import Path

import pytest

from grid2point.config import PipelineConfig, load_config, parse_config_text, write_config
from grid2point.errors import ConfigError


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test outputs."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


def test_defaults():
    cfg = load_config(environ={})
    assert cfg.season == "DJF"
    assert cfg.percentile == 0.95
    assert cfg.return_period == 100.0
    assert cfg.missing_cutoff == 0.1
    assert cfg.year_range == (1950, 1999)
    assert cfg.range_miles == 155.0
    assert cfg.grid_path == Path("data") / "grid_daily.csv"
    assert cfg.future_grid_path is None


def test_parse_config_text_types():
    values = parse_config_text("""
# winter run
season = JJA
percentile=0.97   # trailing comment
degree=2
auto_select=yes
future_grid_file=future.csv
""")
    assert values == {
        "season": "JJA", "percentile": 0.97, "degree": 2, "auto_select": True,
        "future_grid_file": "future.csv",
    }


@pytest.mark.parametrize("text", ["season", "colour=red", "degree=three", "decluster=maybe"])
def test_parse_config_text_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_layers_take_precedence_in_order(temp_dir):
    path = temp_dir / "run.cfg"
    path.write_text("data_dir=from_file\nseason=MAM\npercentile=0.96\n")
    cfg = load_config(path, {"season": "SON", "percentile": None}, environ={"DATA_DIR": "from_env"})
    assert cfg.data_dir == "from_file"
    assert cfg.season == "SON"
    assert cfg.percentile == 0.96

    cfg = load_config(None, {}, environ={"DATA_DIR": "from_env"})
    assert cfg.data_dir == "from_env"


def test_missing_config_file(temp_dir):
    with pytest.raises(ConfigError):
        load_config(temp_dir / "absent.cfg", environ={})


@pytest.mark.parametrize("changes", [
    {"season": "WET"},
    {"percentile": 0.5},
    {"degree": 5},
    {"missing_cutoff": 0.0},
    {"return_period": 1.0},
    {"first_year": 2000, "last_year": 1999},
    {"workers": 0},
])
def test_validation_rejects(changes):
    with pytest.raises(ConfigError):
        PipelineConfig(**changes).validate()


def test_unknown_override():
    with pytest.raises(ConfigError):
        load_config(None, {"colour": "red"}, environ={})


def test_written_config_loads_back(temp_dir):
    cfg = PipelineConfig(season="JJA", degree=1, auto_select=True, future_grid_file="future.csv")
    path = write_config(cfg, temp_dir / "run.cfg")
    assert load_config(path, environ={}) == cfg


@pytest.mark.parametrize("p", [0.97, 0.98, 0.99])
def test_high_percentiles_are_valid_without_stability(p):
    cfg = load_config(None, {"percentile": p}, environ={})
    assert cfg.percentile == p
    assert not cfg.stability


def test_stability_percentile_must_exceed_percentile():
    with pytest.raises(ConfigError):
        load_config(None, {"percentile": 0.97, "stability": True}, environ={})
    cfg = load_config(None, {"percentile": 0.97, "stability": True, "stability_percentile": 0.99}, environ={})
    assert cfg.stability_percentile == 0.99
