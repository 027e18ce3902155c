"""Artifact writers: CSV tables, JSON records and slice heatmaps."""
import json
import logging
import os
from typing import Any, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=wrong-import-position
import numpy as np  # noqa: E402  pylint: disable=wrong-import-position
import pandas as pd  # noqa: E402  pylint: disable=wrong-import-position

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _prepare(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_csv(frame: pd.DataFrame, path: str) -> str:
    """Header row, no index, floats with 17 significant digits."""
    _prepare(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(record: Mapping[str, Any], path: str) -> str:
    _prepare(path)
    with open(path, "w") as f:
        f.write(json.dumps(record, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def write_slice_svg(result: Any, path: str, title: str = "") -> str:
    """Heatmap of a landscape slice with ω* at (0, 0) and local minima as crosses.

    The SVG carries no date and a fixed hash salt so reruns are byte-identical.
    """
    _prepare(path)
    with plt.rc_context({"svg.hashsalt": "loss-convexification", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        losses = np.ma.masked_invalid(result.losses.T)
        mesh = ax.pcolormesh(result.dx, result.dy, losses, shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="loss")
        finite = losses.compressed()
        # contour needs a non-constant surface
        if finite.size and np.ptp(finite) > 0:
            ax.contour(result.dx, result.dy, losses, levels=20, colors="white", linewidths=0.4)
        ax.plot([0.0], [0.0], marker="o", color="red", linestyle="none", label="ground truth")
        minima = result.minima_offsets()
        if minima:
            xs, ys = zip(*minima)
            ax.plot(xs, ys, marker="x", color="black", linestyle="none", label="local minima")
        ax.set_xlabel(f"dx (omega_{result.spec.dim_x})")
        ax.set_ylabel(f"dy (omega_{result.spec.dim_y})")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right", fontsize="small")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info("slice heatmap written to %s", path)
    return path
