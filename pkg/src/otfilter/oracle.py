"""Ground-truth posteriors for evaluation: grid-quadrature Bayes updates for
1-D/2-D static models, the closed-form linear-Gaussian posterior, and a
high-N SIR run used as the sampling reference for dynamic models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .core import RandomSource, Trajectory
from .filters import SIRConfig, filter_step, init_state
from .models import ModelLike, as_state_space, log_likelihood


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid; quadrature is supported in 1-D and 2-D."""

    mins: Tuple[float, ...]
    maxs: Tuple[float, ...]
    points: Tuple[int, ...]

    def __post_init__(self):
        mins = tuple(float(v) for v in np.atleast_1d(self.mins))
        maxs = tuple(float(v) for v in np.atleast_1d(self.maxs))
        points = tuple(int(v) for v in np.atleast_1d(self.points))
        if not len(mins) == len(maxs) == len(points):
            raise ValueError("mins, maxs and points must have equal lengths")
        if len(mins) not in (1, 2):
            raise ValueError("grid quadrature supports 1-D and 2-D only")
        if any(p < 2 for p in points):
            raise ValueError("need at least 2 points per axis")
        if any(hi <= lo for lo, hi in zip(mins, maxs)):
            raise ValueError("each max must exceed its min")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "points", points)

    @property
    def dim(self) -> int:
        return len(self.mins)

    def axes(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, p)
                     for lo, hi, p in zip(self.mins, self.maxs, self.points))


def default_grid(dim: int, prior_std: float, center: float = 0.0) -> GridSpec:
    """+-8 prior standard deviations; 2000 points per axis in 1-D, 400 in 2-D."""
    if dim not in (1, 2):
        raise ValueError("grid quadrature supports 1-D and 2-D only")
    half = 8.0 * prior_std
    pts = 2000 if dim == 1 else 400
    return GridSpec((center - half,) * dim, (center + half,) * dim, (pts,) * dim)


def _mesh_points(axes: Tuple[np.ndarray, ...]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _cell_volume(axes: Tuple[np.ndarray, ...]) -> float:
    vol = 1.0
    for ax in axes:
        d = np.diff(ax)
        if not np.allclose(d, d[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid axes must be uniformly spaced")
        vol *= float(d[0])
    return vol


@dataclass(frozen=True)
class GridPosterior:
    """Normalized density values on a uniform grid (Riemann sum = 1)."""

    axes: Tuple[np.ndarray, ...]
    density: np.ndarray
    cell_volume: float

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        dens = np.asarray(self.density, dtype=np.float64)
        if len(axes) not in (1, 2):
            raise ValueError("grid posteriors support 1-D and 2-D only")
        if dens.shape != tuple(len(a) for a in axes):
            raise ValueError(f"density shape {dens.shape} does not match the axes")
        if np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise ValueError("density must be finite and nonnegative")
        total = dens.sum() * self.cell_volume
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"grid density integrates to {total!r}, not 1")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "density", dens)

    @property
    def dim(self) -> int:
        return len(self.axes)

    def grid_points(self) -> np.ndarray:
        return _mesh_points(self.axes)


def grid_bayes_update(prior_density_fn: Callable[[np.ndarray], np.ndarray],
                      model: ModelLike, y: np.ndarray,
                      grid_spec: GridSpec) -> GridPosterior:
    """Pointwise h(y|x) * prior(x) on the grid, renormalized by the Riemann
    sum. The prior density may be unnormalized; positive rescaling does not
    change the result."""
    axes = grid_spec.axes()
    pts = _mesh_points(axes)
    prior_vals = np.asarray(prior_density_fn(pts), dtype=np.float64)
    if prior_vals.shape != (pts.shape[0],):
        raise ValueError("prior_density_fn must return one value per grid point")
    if np.any(prior_vals < 0):
        raise ValueError("prior density must be nonnegative")
    loglik = np.asarray(log_likelihood(model, np.asarray(y, dtype=np.float64), pts),
                        dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_post = np.log(prior_vals) + loglik
    shift = log_post.max()
    if not np.isfinite(shift):
        raise ValueError("posterior mass vanishes everywhere on the grid")
    vol = _cell_volume(axes)
    # un-shifted normalizer: underflow to zero means even the best grid cell
    # carries no representable mass, i.e. the grid does not cover the posterior
    with np.errstate(under="ignore"):
        z_raw = np.exp(log_post).sum() * vol
    if z_raw == 0.0:
        peak = pts[int(np.argmax(log_post))]
        raise ValueError(f"grid misses the posterior mass (max log-density at {peak})")
    w = np.exp(log_post - shift)
    density = (w / (w.sum() * vol)).reshape(grid_spec.points)
    return GridPosterior(axes, density, vol)


@dataclass(frozen=True)
class LinearGaussianSpec:
    """X ~ N(prior_mean, prior_cov), Y = obs_matrix X + N(0, noise_cov)."""

    prior_mean: np.ndarray
    prior_cov: np.ndarray
    obs_matrix: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.prior_mean, dtype=np.float64))
        p = np.atleast_2d(np.asarray(self.prior_cov, dtype=np.float64))
        h = np.atleast_2d(np.asarray(self.obs_matrix, dtype=np.float64))
        r = np.atleast_2d(np.asarray(self.noise_cov, dtype=np.float64))
        n = m.shape[0]
        if p.shape != (n, n):
            raise ValueError("prior_cov must be (n, n)")
        if h.shape[1] != n:
            raise ValueError("obs_matrix must be (m, n)")
        if r.shape != (h.shape[0], h.shape[0]):
            raise ValueError("noise_cov must be (m, m)")
        for name, arr in (("prior_mean", m), ("prior_cov", p), ("obs_matrix", h), ("noise_cov", r)):
            object.__setattr__(self, name, arr)


def exact_kalman_posterior(spec: LinearGaussianSpec, y: np.ndarray):
    """Conditional mean and covariance of X given Y = y.

    mu = m + K(y - Hm), Sigma = P - K H P with K = P H^T (H P H^T + R)^{-1}.
    """
    m, p, h, r = spec.prior_mean, spec.prior_cov, spec.obs_matrix, spec.noise_cov
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (h.shape[0],):
        raise ValueError(f"y has shape {y.shape}, expected {(h.shape[0],)}")
    s = h @ p @ h.T + r
    if np.linalg.cond(s) > 1e12:
        raise np.linalg.LinAlgError("observation covariance H P H^T + R is singular")
    gain = np.linalg.solve(s, h @ p).T
    mean = m + gain @ (y - h @ m)
    cov = p - gain @ h @ p
    return mean, cov


def reference_sir_posterior(model: ModelLike, trajectory: Trajectory,
                            n_ref: int = 100000, rng: Optional[RandomSource] = None,
                            subsample_to: Optional[int] = None) -> Tuple[np.ndarray, ...]:
    """SIR at large N as the MMD reference; returns one particle set per step
    (index 0 is the initial draw, aligned with FilterRun.states).

    subsample_to keeps an evenly spaced subset per step to bound memory; the
    resampled clouds are exchangeable, so thinning preserves the law.
    """
    if rng is None:
        raise ValueError("reference_sir_posterior needs an explicit RandomSource")
    ssm = as_state_space(model)
    state = init_state("sir", ssm, n_ref, SIRConfig(), rng)

    def keep(particles: np.ndarray) -> np.ndarray:
        if subsample_to is None or particles.shape[0] <= subsample_to:
            return particles.copy()
        idx = np.linspace(0, particles.shape[0] - 1, subsample_to).round().astype(int)
        return particles[idx].copy()

    sets = [keep(state.ensemble.particles)]
    for t in range(trajectory.steps):
        try:
            state = filter_step("sir", state, trajectory.observations[t], ssm,
                                rng.child("step", t))
        except FloatingPointError as exc:
            raise RuntimeError(f"reference SIR weights degenerate at step {t + 1}") from exc
        sets.append(keep(state.ensemble.particles))
    return tuple(sets)


def grid_moments(gp: GridPosterior):
    """Riemann-sum mean vector and covariance matrix of the grid posterior."""
    pts = gp.grid_points()
    probs = gp.density.ravel() * gp.cell_volume
    mean = probs @ pts
    centered = pts - mean
    cov = np.einsum("k,ki,kj->ij", probs, centered, centered, optimize=False)
    return mean, cov


def grid_sample(gp: GridPosterior, count: int, rng: RandomSource) -> np.ndarray:
    """Inverse-CDF draws along the flattened grid with uniform jitter inside
    each cell; returns (count, dim)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    probs = gp.density.ravel() * gp.cell_volume
    cum = np.cumsum(probs)
    cum /= cum[-1]
    gen = rng.generator()
    flat = np.searchsorted(cum, gen.random(count), side="right")
    flat = np.minimum(flat, probs.size - 1)
    idx = np.unravel_index(flat, gp.density.shape)
    cols = []
    for k, ax in enumerate(gp.axes):
        dx = ax[1] - ax[0]
        cols.append(ax[idx[k]] + (gen.random(count) - 0.5) * dx)
    return np.stack(cols, axis=1)
