"""Sequential filters over a shared propagate/condition step: the ensemble
Kalman analysis, sequential importance resampling, and the trained
conditional-transport update.

All three consume the same per-step random streams for propagation
("prop") and simulated observations ("obs"), so methods that share those
stages see bit-identical forecast ensembles under the same seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg

from .core import (
    Ensemble,
    RandomSource,
    StateSpaceModel,
    Trajectory,
    propagate_ensemble,
    sample_observation_ensemble,
)
from .nn import _mm_tn
from .transport import (
    EnKFBlock,
    Potential,
    TrainConfig,
    TrainingDiverged,
    TransportMap,
    apply_map,
    enkf_block_apply,
    fit_conditional_map,
    halve_outer,
    make_potential,
    make_transport_map,
)

METHODS = ("enkf", "sir", "otpf")


@dataclass(frozen=True)
class EnKFConfig:
    """obs_noise_var is the Gamma added to the sampled-observation covariance
    in the gain; None takes it from the model. Must be positive so the solve
    matrix stays positive definite."""

    obs_noise_var: Optional[float] = None

    def __post_init__(self):
        if self.obs_noise_var is not None and not self.obs_noise_var > 0:
            raise ValueError("obs_noise_var must be positive")


@dataclass(frozen=True)
class SIRConfig:
    """Resamples every step by default; with adaptive=True it resamples only
    when ESS < ess_threshold * N and carries the weights over otherwise."""

    adaptive: bool = False
    ess_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class OTPFConfig:
    """Architecture and training schedule for the transport update. The
    networks are created once per run (zeroed output heads, so the untrained
    map is the EnKF update when the block is on, identity otherwise) and
    warm-started across steps; outer_init halves per step down to
    outer_floor. obs_noise_var feeds the frozen gain; None takes the model's.
    """

    width: int = 32
    blocks: int = 2
    lr_f: float = 1e-3
    lr_map: float = 1e-3
    inner_iters: int = 10
    outer_init: int = 1024
    outer_floor: int = 64
    batch_size: int = 64
    use_enkf_block: bool = True
    obs_noise_var: Optional[float] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_f=self.lr_f,
            lr_map=self.lr_map,
            inner_iters=self.inner_iters,
            outer_iters=self.outer_init,
            batch_size=self.batch_size,
            outer_floor=self.outer_floor,
        )


MethodConfig = Union[EnKFConfig, SIRConfig, OTPFConfig]

_DEFAULTS = {"enkf": EnKFConfig, "sir": SIRConfig, "otpf": OTPFConfig}


@dataclass(frozen=True)
class OTPFCarry:
    """Warm-started networks and the current outer-iteration budget."""

    f: Potential
    T: TransportMap
    train_cfg: TrainConfig


@dataclass(frozen=True)
class FilterState:
    """Posterior ensemble after step_index assimilations plus per-method
    carry-over and the last step's diagnostics."""

    ensemble: Ensemble
    config: MethodConfig
    step_index: int = 0
    otpf: Optional[OTPFCarry] = None
    last_ess: Optional[float] = None
    last_trace: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FilterRun:
    """Full history of one filtering pass: states[t] / weights[t] hold the
    ensemble after t assimilation steps (t=0 is the initial draw);
    wall_seconds[t-1] is step t's wall-clock time."""

    method: str
    model_name: str
    states: np.ndarray
    weights: np.ndarray
    ess: np.ndarray
    wall_seconds: np.ndarray
    traces: Tuple[np.ndarray, ...]
    config: MethodConfig

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def particles(self) -> int:
        return self.states.shape[1]

    def posterior_at(self, t: int) -> Ensemble:
        w = self.weights[t]
        uniform = np.allclose(w, 1.0 / len(w), rtol=0.0, atol=1e-15)
        return Ensemble(self.states[t], None if uniform else w)

    def posterior_means(self) -> np.ndarray:
        """(T+1, n) weighted ensemble means."""
        return np.einsum("tN,tNn->tn", self.weights, self.states, optimize=False)


def effective_sample_size(weights: np.ndarray) -> float:
    """1 / sum(w^2) for normalized weights; ranges from 1 to N."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    w = w / total
    return float(1.0 / np.sum(w * w))


def kalman_gain(particles: np.ndarray, obs_ens: np.ndarray, obs_noise_var: float) -> np.ndarray:
    """Empirical gain C^xy (C^yy + Gamma)^{-1} with 1/N covariance
    normalization; C^yy comes from the sampled (already noisy) observation
    ensemble, so Gamma enters on top of the sampling noise by construction.
    The solve goes through a Cholesky factorization of C^yy + Gamma.
    """
    x = np.asarray(particles, dtype=np.float64)
    y = np.asarray(obs_ens, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("particles and obs_ens must be row-aligned 2-D arrays")
    if obs_noise_var < 0:
        raise ValueError("obs_noise_var must be >= 0")
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cxy = _mm_tn(xc, yc) / n
    cyy = _mm_tn(yc, yc) / n
    s = cyy + obs_noise_var * np.eye(y.shape[1])
    # finite particles can still overflow the covariance products
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(cxy))):
        raise FloatingPointError("ensemble covariance overflowed (particle blow-up)")
    try:
        factor = scipy.linalg.cho_factor(s, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise FloatingPointError(
            f"observation covariance is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, cxy.T).T


def enkf_analysis(ens: Ensemble, obs_ens: np.ndarray, y: np.ndarray,
                  cfg: EnKFConfig) -> Ensemble:
    """Perturbed-observation update X^i + K(y - Y^i)."""
    if cfg.obs_noise_var is None:
        raise ValueError("EnKFConfig.obs_noise_var is unset and no model default was resolved")
    if ens.weights is not None:
        raise ValueError("enkf_analysis requires an unweighted ensemble")
    gain = kalman_gain(ens.particles, obs_ens, cfg.obs_noise_var)
    updated = enkf_block_apply(EnKFBlock(gain), ens.particles, obs_ens, y)
    return Ensemble(updated)


def sir_weights(model: StateSpaceModel, ens: Ensemble, y: np.ndarray) -> np.ndarray:
    """Posterior weights proportional to prior weight times h(y | X^i),
    normalized in log space."""
    if model.log_lik is None:
        raise ValueError("sir requires a model with an observation density")
    loglik = np.asarray(model.log_lik(np.asarray(y, dtype=np.float64), ens.particles),
                        dtype=np.float64)
    if loglik.shape != (ens.size,):
        raise ValueError(f"log_lik returned shape {loglik.shape}, expected {(ens.size,)}")
    logw = loglik if ens.weights is None else loglik + np.log(ens.weights)
    shift = logw.max()
    if not np.isfinite(shift):
        raise FloatingPointError("every particle has zero likelihood (weight collapse)")
    w = np.exp(logw - shift)
    return w / w.sum()


def multinomial_resample(ens: Ensemble, weights: np.ndarray, rng: RandomSource) -> Ensemble:
    """Draw N particles with replacement according to the weights; the
    resampled ensemble is unweighted."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (ens.size,):
        raise ValueError("weights must align with the ensemble")
    gen = rng.generator()
    idx = gen.choice(ens.size, ens.size, True, w)
    return Ensemble(ens.particles[idx])


def _resolve_obs_noise_var(cfg_var: Optional[float], model: StateSpaceModel) -> float:
    if cfg_var is not None:
        return cfg_var
    if model.obs_noise_var is None:
        raise ValueError("model declares no obs_noise_var; set it on the config")
    return float(model.obs_noise_var)


def init_state(method: str, model: StateSpaceModel, count: int,
               cfg: Optional[MethodConfig], rng: RandomSource) -> FilterState:
    """Initial particle draw plus per-method setup (OTPF builds its networks
    here, once per run)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if cfg is None:
        cfg = _DEFAULTS[method]()
    if model.initial is None:
        raise ValueError("model has no initial-distribution sampler")
    particles = np.asarray(model.initial(count, rng.child("init").generator()),
                           dtype=np.float64)
    if particles.shape != (count, model.state_dim):
        raise ValueError(f"initial sampler returned shape {particles.shape}")
    ens = Ensemble(particles)
    otpf = None
    if method == "otpf":
        f = make_potential(model.state_dim, model.obs_dim, cfg.width, cfg.blocks,
                           rng.child("init_f"), zero_last=True)
        t_map = make_transport_map(model.state_dim, model.obs_dim, cfg.width, cfg.blocks,
                                   rng.child("init_map"), zero_last=True)
        otpf = OTPFCarry(f, t_map, cfg.train_config())
    return FilterState(ensemble=ens, config=cfg, otpf=otpf)


def filter_step(method: str, state: FilterState, y: np.ndarray,
                model: StateSpaceModel, rng: RandomSource) -> FilterState:
    """One propagate-then-condition cycle on the observation y. rng must be
    this step's own stream; substreams "prop", "obs", "resample" and "train"
    are derived from it."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = state.config
    prior_weights = state.ensemble.weights
    forecast = propagate_ensemble(model, Ensemble(state.ensemble.particles),
                                  rng.child("prop"))

    if method == "enkf":
        obs_ens = sample_observation_ensemble(model, forecast, rng.child("obs"))
        var = _resolve_obs_noise_var(cfg.obs_noise_var, model)
        posterior = enkf_analysis(forecast, obs_ens, y, EnKFConfig(var))
        return replace(state, ensemble=posterior, step_index=state.step_index + 1,
                       last_ess=float(posterior.size), last_trace=None)

    if method == "sir":
        weighted = Ensemble(forecast.particles, prior_weights)
        try:
            weights = sir_weights(model, weighted, y)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"degenerate weights at step {state.step_index + 1}: {exc}") from exc
        ess = effective_sample_size(weights)
        n = forecast.size
        if not cfg.adaptive or ess < cfg.ess_threshold * n:
            posterior = multinomial_resample(forecast, weights, rng.child("resample"))
        else:
            posterior = Ensemble(forecast.particles, weights)
        return replace(state, ensemble=posterior, step_index=state.step_index + 1,
                       last_ess=ess, last_trace=None)

    # otpf
    carry = state.otpf
    if carry is None:
        raise ValueError("otpf state is missing its network carry; use init_state")
    obs_ens = sample_observation_ensemble(model, forecast, rng.child("obs"))
    t_map = carry.T
    if cfg.use_enkf_block:
        var = _resolve_obs_noise_var(cfg.obs_noise_var, model)
        gain = kalman_gain(forecast.particles, obs_ens, var)
        t_map = TransportMap(t_map.net, EnKFBlock(gain))
    f, t_map, trace = fit_conditional_map(forecast.particles, obs_ens,
                                          (carry.f, t_map), carry.train_cfg,
                                          rng.child("train"))
    moved = apply_map(t_map, forecast.particles, np.asarray(y, dtype=np.float64),
                      paired_obs=obs_ens if cfg.use_enkf_block else None)
    if not np.all(np.isfinite(moved)):
        raise FloatingPointError("transport map produced non-finite particles")
    posterior = Ensemble(moved)
    next_carry = OTPFCarry(f, t_map, halve_outer(carry.train_cfg))
    return replace(state, ensemble=posterior, step_index=state.step_index + 1,
                   otpf=next_carry, last_ess=float(posterior.size), last_trace=trace)


class FilterAborted(RuntimeError):
    """A filter run failed mid-trajectory. Carries the completed prefix as
    .partial (a FilterRun covering steps before the failure) and the 1-based
    index of the failed step as .failed_step."""

    def __init__(self, message: str, partial: "FilterRun", failed_step: int):
        super().__init__(message)
        self.partial = partial
        self.failed_step = failed_step


def run_filter(method: str, model: StateSpaceModel, trajectory: Trajectory,
               count: int, cfg: Optional[MethodConfig] = None,
               rng: Optional[RandomSource] = None) -> FilterRun:
    """Assimilate every observation in the trajectory with N=count particles.

    The stream layout is fixed: rng.child("init") draws the initial ensemble,
    rng.child("step", t) drives step t. Methods sharing a stage therefore see
    identical random draws for it. A zero-step trajectory yields a run holding
    only the initial ensemble. Numerical failures raise FilterAborted with the
    completed prefix attached.
    """
    if rng is None:
        raise ValueError("run_filter needs an explicit RandomSource")
    state = init_state(method, model, count, cfg, rng)
    n_steps = trajectory.steps
    states = np.empty((n_steps + 1, count, model.state_dim))
    weights = np.empty((n_steps + 1, count))
    ess = np.empty(n_steps)
    walls = np.empty(n_steps)
    traces = []
    states[0] = state.ensemble.particles
    weights[0] = 1.0 / count

    def _assemble(done: int) -> FilterRun:
        return FilterRun(
            method=method,
            model_name=model.name,
            states=states[:done + 1],
            weights=weights[:done + 1],
            ess=ess[:done],
            wall_seconds=walls[:done],
            traces=tuple(traces),
            config=state.config,
        )

    for t in range(n_steps):
        t0 = time.perf_counter()
        try:
            state = filter_step(method, state, trajectory.observations[t], model,
                                rng.child("step", t))
        except (FloatingPointError, TrainingDiverged) as exc:
            raise FilterAborted(f"{method} run aborted at step {t + 1}: {exc}",
                                partial=_assemble(t), failed_step=t + 1) from exc
        walls[t] = time.perf_counter() - t0
        states[t + 1] = state.ensemble.particles
        w = state.ensemble.weights
        weights[t + 1] = 1.0 / count if w is None else w
        ess[t] = state.last_ess
        if state.last_trace is not None:
            traces.append(state.last_trace)
    return _assemble(n_steps)
