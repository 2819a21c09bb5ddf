"""Static return-level maps drawn with matplotlib (SVG by default, PNG by suffix)."""
import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import PreconditionError

logger = logging.getLogger(__name__)

FIGSIZE = (8, 5)
CMAP = "RdYlBu_r"
MARK_SIZE = 25

# Fixed ids and no timestamp, so reruns write identical SVG.
SVG_RC = {"svg.hashsalt": "grid2point", "svg.fonttype": "none"}


def map_figure(
    values: Sequence[float],
    lats: Sequence[float],
    lons: Sequence[float],
    title: str = "",
) -> plt.Figure:
    """Scatter of ``values`` at (lon, lat) with a colorbar.

    Constant values have no color range to show, so they get a one-entry
    legend in place of the colorbar.
    """
    values = np.asarray(values, dtype=float)
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    if values.size == 0:
        raise PreconditionError("nothing to draw: no values")
    if not (values.shape == lats.shape == lons.shape):
        raise PreconditionError("values, lats and lons must have the same length")

    fig, ax = plt.subplots(figsize=FIGSIZE)
    cmap = matplotlib.colormaps[CMAP]
    if values.min() == values.max():
        ax.scatter(lons, lats, s=MARK_SIZE, color=cmap(0.0), label=f"{values[0]:.4g}")
        ax.legend(loc="best")
    else:
        im = ax.scatter(lons, lats, s=MARK_SIZE, c=values, cmap=cmap)
        fig.colorbar(im, ax=ax)
    ax.set_xlabel("Longitude")
    ax.set_ylabel("Latitude")
    if title:
        ax.set_title(title)
    return fig


def render_map(
    values: Sequence[float],
    lats: Sequence[float],
    lons: Sequence[float],
    output_path: Union[str, Path],
    title: str = "",
) -> Path:
    """Write :func:`map_figure` to ``output_path``; PNG for ``.png``, SVG otherwise."""
    fig = map_figure(values, lats, lons, title)
    path = Path(output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if path.suffix.lower() == ".png":
            fig.savefig(path, format="png", bbox_inches="tight", metadata={"Software": None})
        else:
            with matplotlib.rc_context(SVG_RC):
                fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info("map with %d points written to %s", np.size(values), path)
    return path
