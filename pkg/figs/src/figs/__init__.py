"""Figure rendering for experiment artifact CSVs.

Four figure kinds, all reading the harness artifact schemas directly:
particle trajectories (one panel per method), metric curves over time,
posterior histograms with an optional exact-density overlay, and sweep
curves with error bars.
"""

from .io import (FigsError, read_density, read_metrics, read_particles,
                 read_sweep, read_truth, sniff_schema)
from .render import KINDS, FigureJob, build_figure, render

__version__ = "0.1.0"

__all__ = [
    "FigsError",
    "FigureJob",
    "KINDS",
    "build_figure",
    "read_density",
    "read_metrics",
    "read_particles",
    "read_sweep",
    "read_truth",
    "render",
    "sniff_schema",
    "__version__",
]
