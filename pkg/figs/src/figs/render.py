"""Figure assembly for the four artifact-backed figure kinds.

Every plotted series is taken verbatim from the input CSVs; this layer
never aggregates, resamples, or recomputes metrics. build_figure returns
the matplotlib figure together with the exact arrays that were plotted so
callers can verify the round trip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import (FigsError, read_density, read_metrics, read_particles,
                 read_sweep, read_truth, sniff_schema)

KINDS = ("trajectories", "metric_curves", "histogram", "sweep")

# role -> (schema, required) per figure kind; extra inputs are rejected
_INPUT_ROLES = {
    "trajectories": {"particles": True, "truth": False},
    "metric_curves": {"metrics": True},
    "histogram": {"particles": True, "density": False},
    "sweep": {"sweep": True},
}

_STYLE_KEYS = {
    "trajectories": {"title", "figsize", "coord", "run_id"},
    "metric_curves": {"title", "figsize", "metric"},
    "histogram": {"title", "figsize", "coord", "run_id", "time_index", "bins"},
    "sweep": {"title", "figsize", "metric"},
}

_SERIES_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red",
                  "tab:purple", "tab:brown", "tab:pink", "tab:gray")


@dataclass(frozen=True)
class FigureJob:
    """One rendering request: input artifacts, figure kind, output, style."""

    kind: str
    inputs: Tuple[str, ...]
    out: str
    style: Dict[str, object] = field(default_factory=dict)
    overwrite: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FigsError(f"unknown figure kind '{self.kind}'; "
                            f"choose from {', '.join(KINDS)}")
        if not self.inputs:
            raise FigsError("no input files given")
        unknown = set(self.style) - _STYLE_KEYS[self.kind]
        if unknown:
            raise FigsError(f"unknown style option '{sorted(unknown)[0]}' "
                            f"for kind '{self.kind}'")


def _assign_inputs(job: FigureJob) -> Dict[str, Path]:
    roles = _INPUT_ROLES[job.kind]
    assigned: Dict[str, Path] = {}
    for raw in job.inputs:
        path = Path(raw)
        schema = sniff_schema(path)
        if schema not in roles:
            raise FigsError(f"{path.name}: schema '{schema}' is not used by "
                            f"kind '{job.kind}'")
        if schema in assigned:
            raise FigsError(f"{path.name}: duplicate '{schema}' input")
        assigned[schema] = path
    for role, required in roles.items():
        if required and role not in assigned:
            raise FigsError(f"kind '{job.kind}' requires a '{role}' input")
    return assigned


def _style_int(style: Dict[str, object], key: str, default: int) -> int:
    v = style.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool):
        raise FigsError(f"style option '{key}' must be an integer")
    return v


def _figsize(style: Dict[str, object], default: Tuple[float, float]):
    v = style.get("figsize")
    if v is None:
        return default
    if (not isinstance(v, (list, tuple)) or len(v) != 2
            or not all(isinstance(x, (int, float)) for x in v)):
        raise FigsError("style option 'figsize' must be [width, height]")
    return (float(v[0]), float(v[1]))


def _ordered_unique(values) -> list:
    return list(dict.fromkeys(values))


def _pick_run(run_ids: np.ndarray, style: Dict[str, object]) -> int:
    rid = _style_int(style, "run_id", int(run_ids.min()))
    if rid not in run_ids:
        raise FigsError(f"run_id {rid} not present; "
                        f"available: {sorted(set(run_ids.tolist()))}")
    return rid


def _pick_metric(present: list, style: Dict[str, object]) -> str:
    chosen = style.get("metric")
    if chosen is None:
        if len(present) == 1:
            return present[0]
        raise FigsError(f"several metrics present ({', '.join(present)}); "
                        "pick one with style option 'metric'")
    if chosen not in present:
        raise FigsError(f"metric '{chosen}' not present; "
                        f"available: {', '.join(present)}")
    return str(chosen)


def _fig_trajectories(paths: Dict[str, Path], style: Dict[str, object]):
    parts = read_particles(paths["particles"])
    coord = _style_int(style, "coord", 0)
    dim = parts["coords"].shape[1]
    if not 0 <= coord < dim:
        raise FigsError(f"style option 'coord' out of range: {coord} "
                        f"(state dimension {dim})")
    rid = _pick_run(parts["run_id"], style)
    keep = parts["run_id"] == rid
    methods = _ordered_unique(parts["method"][keep])

    truth_series: Optional[Tuple[np.ndarray, np.ndarray]] = None
    if "truth" in paths:
        tr = read_truth(paths["truth"])
        sel = (tr["run_id"] == rid) & (tr["kind"] == "state") & (tr["axis"] == coord)
        if not np.any(sel):
            raise FigsError(f"truth input has no state rows for axis {coord}, "
                            f"run_id {rid}")
        order = np.argsort(tr["time_index"][sel], kind="stable")
        truth_series = (tr["time_index"][sel][order], tr["value"][sel][order])

    fig, axes = plt.subplots(1, len(methods), sharey=True, squeeze=False,
                             figsize=_figsize(style, (4.0 * len(methods), 3.2)))
    data = {"particles": {}, "truth": truth_series}
    for col, method in enumerate(methods):
        ax = axes[0][col]
        m_sel = keep & (parts["method"] == method)
        for pi in _ordered_unique(parts["particle_index"][m_sel]):
            p_sel = m_sel & (parts["particle_index"] == pi)
            order = np.argsort(parts["time_index"][p_sel], kind="stable")
            t = parts["time_index"][p_sel][order]
            x = parts["coords"][p_sel, coord][order]
            ax.plot(t, x, color="tab:blue", alpha=0.35, linewidth=0.8)
            data["particles"][(method, int(pi))] = (t, x)
        if truth_series is not None:
            ax.plot(truth_series[0], truth_series[1], color="black",
                    linestyle="--", linewidth=1.4, label="truth")
            ax.legend(loc="best")
        ax.set_title(method)
        ax.set_xlabel("step")
    axes[0][0].set_ylabel(f"x{coord}")
    if "title" in style:
        fig.suptitle(str(style["title"]))
    return fig, data


def _fig_metric_curves(paths: Dict[str, Path], style: Dict[str, object]):
    m = read_metrics(paths["metrics"])
    metric = _pick_metric(_ordered_unique(m["metric"]), style)
    sel = m["metric"] == metric
    methods = _ordered_unique(m["method"][sel])
    run_ids = sorted(set(m["run_id"][sel].tolist()))

    fig, ax = plt.subplots(figsize=_figsize(style, (6.4, 4.0)))
    data = {}
    for mi, method in enumerate(methods):
        color = _SERIES_COLORS[mi % len(_SERIES_COLORS)]
        for rid in run_ids:
            r_sel = sel & (m["method"] == method) & (m["run_id"] == rid)
            if not np.any(r_sel):
                continue
            order = np.argsort(m["time_index"][r_sel], kind="stable")
            t = m["time_index"][r_sel][order]
            v = m["value"][r_sel][order]
            label = method if len(run_ids) == 1 else f"{method} seed {rid}"
            ax.plot(t, v, color=color, marker="", linewidth=1.2,
                    alpha=1.0 if len(run_ids) == 1 else 0.7, label=label)
            data[(method, int(rid))] = (t, v)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.legend(loc="best")
    if "title" in style:
        ax.set_title(str(style["title"]))
    return fig, data


def _fig_histogram(paths: Dict[str, Path], style: Dict[str, object]):
    parts = read_particles(paths["particles"])
    coord = _style_int(style, "coord", 0)
    dim = parts["coords"].shape[1]
    if not 0 <= coord < dim:
        raise FigsError(f"style option 'coord' out of range: {coord} "
                        f"(state dimension {dim})")
    rid = _pick_run(parts["run_id"], style)
    keep = parts["run_id"] == rid
    t_sel = _style_int(style, "time_index", int(parts["time_index"][keep].max()))
    keep = keep & (parts["time_index"] == t_sel)
    if not np.any(keep):
        raise FigsError(f"no particle rows at time_index {t_sel} for run_id {rid}")
    bins = _style_int(style, "bins", 30)
    if bins < 1:
        raise FigsError("style option 'bins' must be >= 1")
    methods = _ordered_unique(parts["method"][keep])

    density = read_density(paths["density"]) if "density" in paths else None

    fig, axes = plt.subplots(1, len(methods), sharey=True, squeeze=False,
                             figsize=_figsize(style, (4.0 * len(methods), 3.2)))
    data = {"samples": {}, "density": None}
    if density is not None:
        data["density"] = (density["x"], density["density"])
    for col, method in enumerate(methods):
        ax = axes[0][col]
        vals = parts["coords"][keep & (parts["method"] == method), coord]
        ax.hist(vals, bins=bins, density=True, color="tab:blue", alpha=0.6)
        data["samples"][method] = vals
        if density is not None:
            ax.plot(density["x"], density["density"], color="black",
                    linewidth=1.4, label="exact")
            ax.legend(loc="best")
        ax.set_title(method)
        ax.set_xlabel(f"x{coord}")
    axes[0][0].set_ylabel("density")
    if "title" in style:
        fig.suptitle(str(style["title"]))
    return fig, data


def _fig_sweep(paths: Dict[str, Path], style: Dict[str, object]):
    s = read_sweep(paths["sweep"])
    metric = _pick_metric(_ordered_unique(s["metric"]), style)
    sel = s["metric"] == metric
    axes_present = _ordered_unique(s["axis"][sel])
    if len(axes_present) != 1:
        raise FigsError(f"sweep input mixes axes {', '.join(axes_present)}; "
                        "split the file per axis")
    methods = _ordered_unique(s["method"][sel])

    fig, ax = plt.subplots(figsize=_figsize(style, (6.4, 4.0)))
    data = {}
    for mi, method in enumerate(methods):
        m_sel = sel & (s["method"] == method)
        order = np.argsort(s["value"][m_sel], kind="stable")
        x = s["value"][m_sel][order]
        y = s["mean"][m_sel][order]
        err = s["stderr"][m_sel][order]
        ax.errorbar(x, y, yerr=err, marker="o", capsize=3.0,
                    color=_SERIES_COLORS[mi % len(_SERIES_COLORS)], label=method)
        data[method] = (x, y, err)
    ax.set_xlabel(axes_present[0])
    ax.set_ylabel(metric)
    ax.legend(loc="best")
    if "title" in style:
        ax.set_title(str(style["title"]))
    return fig, data


_BUILDERS = {
    "trajectories": _fig_trajectories,
    "metric_curves": _fig_metric_curves,
    "histogram": _fig_histogram,
    "sweep": _fig_sweep,
}


def build_figure(job: FigureJob):
    """Assemble the figure for a job.

    Returns:
        (figure, data) where data holds the exact arrays that were plotted,
        keyed per series; callers own closing the figure.
    """
    paths = _assign_inputs(job)
    return _BUILDERS[job.kind](paths, dict(job.style))


def render(job: FigureJob) -> Path:
    """Build the figure and write it to job.out; returns the written path.

    The output format follows the file extension (.svg default, .png for
    raster); an existing output is rejected unless job.overwrite is set.
    """
    out = Path(job.out)
    if out.suffix == "":
        out = out.with_suffix(".svg")
    if out.suffix not in (".svg", ".png"):
        raise FigsError(f"unsupported output format '{out.suffix}'; "
                        "use .svg or .png")
    if out.exists() and not job.overwrite:
        raise FigsError(f"output already exists: {out} (set overwrite to replace)")
    fig, _ = build_figure(job)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out)
    finally:
        plt.close(fig)
    return out
