"""Evaluation metrics: RBF-kernel MMD (biased V-statistic), state-estimate
MSE against the truth trajectory, ESS series and the bimodal mode-balance
diagnostic. Rows feed the experiment CSVs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import Trajectory
from .filters import FilterRun

METRIC_NAMES = ("mmd2", "mse", "ess", "mode_balance", "wall_seconds")

BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class MmdConfig:
    """bandwidth in state units; rule records how it was chosen."""

    bandwidth: float
    rule: str = "fixed"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.rule not in ("fixed", "median-heuristic"):
            raise ValueError("rule must be 'fixed' or 'median-heuristic'")


@dataclass(frozen=True)
class MetricRow:
    time_index: int
    method: str
    metric: str
    value: float
    run_id: int

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRIC_NAMES}")
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.metric} at step {self.time_index} is non-finite")


@dataclass(frozen=True)
class MetricSeries:
    rows: Tuple[MetricRow, ...]

    def values(self, metric: Optional[str] = None) -> np.ndarray:
        return np.array([r.value for r in self.rows
                         if metric is None or r.metric == metric])

    def __add__(self, other: "MetricSeries") -> "MetricSeries":
        return MetricSeries(self.rows + other.rows)


def rbf_kernel(u: np.ndarray, v: np.ndarray, bandwidth: float) -> np.ndarray:
    """exp(-||u-v||^2 / (2 bandwidth^2)) for vectors or row batches; batch
    inputs produce the full Gram matrix."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    sq = (
        np.sum(u * u, axis=1)[:, None]
        + np.sum(v * v, axis=1)[None, :]
        - 2.0 * np.einsum("ad,bd->ab", u, v, optimize=False)
    )
    gram = np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))
    return gram if gram.size > 1 else float(gram[0, 0])


def _as_points(samples: np.ndarray) -> np.ndarray:
    pts = np.asarray(samples, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("samples must be a nonempty (N, d) array")
    return pts


def _even_subsample(pts: np.ndarray, cap: int) -> np.ndarray:
    # deterministic thinning; particle clouds are exchangeable so evenly
    # spaced indices are an unbiased subsample and keep reruns byte-stable
    if cap is None or pts.shape[0] <= cap:
        return pts
    idx = np.linspace(0, pts.shape[0] - 1, cap).round().astype(int)
    return pts[idx]


def median_bandwidth(samples: np.ndarray, cap: int = 1000) -> float:
    """Median pairwise distance over a capped subsample, floored at 1e-6
    (identical points would otherwise give a zero-width kernel)."""
    pts = _even_subsample(_as_points(samples), cap)
    if pts.shape[0] < 2:
        raise ValueError("median_bandwidth needs at least 2 samples")
    sq = (
        np.sum(pts * pts, axis=1)[:, None]
        + np.sum(pts * pts, axis=1)[None, :]
        - 2.0 * np.einsum("ad,bd->ab", pts, pts, optimize=False)
    )
    iu = np.triu_indices(pts.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(sq[iu], 0.0))))
    return max(med, BANDWIDTH_FLOOR)


def mmd_squared(samples_a: np.ndarray, samples_b: np.ndarray, cfg: MmdConfig,
                cap: int = 2000) -> float:
    """Biased V-statistic (diagonal terms included):
    mean k(a,a') + mean k(b,b') - 2 mean k(a,b)."""
    a = _even_subsample(_as_points(samples_a), cap)
    b = _even_subsample(_as_points(samples_b), cap)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    kaa = rbf_kernel(a, a, cfg.bandwidth)
    kbb = rbf_kernel(b, b, cfg.bandwidth)
    kab = rbf_kernel(a, b, cfg.bandwidth)
    return float(np.mean(kaa) + np.mean(kbb) - 2.0 * np.mean(kab))


def mode_balance(particles: np.ndarray, axis: int = 0) -> float:
    """Fraction of particles on the positive side of the given coordinate."""
    pts = _as_points(particles)
    if not 0 <= axis < pts.shape[1]:
        raise ValueError(f"axis {axis} out of range for dim {pts.shape[1]}")
    return float(np.mean(pts[:, axis] > 0.0))


def state_mse(run: FilterRun, truth: Trajectory, run_id: int = 0) -> MetricSeries:
    """Squared error ||ensemble mean - X_t||^2 per assimilation step."""
    if run.steps != truth.steps:
        raise ValueError(f"run has {run.steps} steps but truth has {truth.steps}")
    means = run.posterior_means()
    rows = []
    for t in range(1, run.steps + 1):
        err = means[t] - truth.states[t]
        rows.append(MetricRow(t, run.method, "mse", float(np.sum(err * err)), run_id))
    return MetricSeries(tuple(rows))


def ess_series(run: FilterRun, run_id: int = 0) -> MetricSeries:
    """Post-conditioning ESS per step (N for the equal-weight methods)."""
    rows = [MetricRow(t + 1, run.method, "ess", float(run.ess[t]), run_id)
            for t in range(run.steps)]
    return MetricSeries(tuple(rows))


def mode_balance_series(run: FilterRun, run_id: int = 0, axis: int = 0) -> MetricSeries:
    rows = [MetricRow(t, run.method, "mode_balance",
                      mode_balance(run.states[t], axis), run_id)
            for t in range(1, run.steps + 1)]
    return MetricSeries(tuple(rows))


def mmd_series(run: FilterRun, reference: Sequence[np.ndarray], cfg: MmdConfig,
               run_id: int = 0, cap: int = 2000) -> MetricSeries:
    """mmd2 between the run's ensemble and the reference sample set at each
    assimilation step; reference[t] aligns with run.states[t]."""
    if len(reference) != run.steps + 1:
        raise ValueError(f"reference has {len(reference)} step sets, expected {run.steps + 1}")
    rows = []
    for t in range(1, run.steps + 1):
        val = mmd_squared(run.states[t], reference[t], cfg, cap=cap)
        rows.append(MetricRow(t, run.method, "mmd2", val, run_id))
    return MetricSeries(tuple(rows))
