"""Benchmark state-space models: static squared/bimodal conditioning problems,
a polynomial-observation AR(1) family, and the Lorenz 63/96 twin experiments.

All observation kernels here are Gaussian, y = h_mean(x) + sigma*W, so every
model carries an exact log-likelihood for SIR and the quadrature oracles.
Static models reuse the filtering loop by giving the transition kernel the
prior itself (a(.|x) = pi_0): one assimilation step then computes the static
posterior exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np

from .core import Ensemble, RandomSource, StateSpaceModel

ModelLike = Union[StateSpaceModel, "ModelBase"]


def _rowwise_gaussian_log_lik(y: np.ndarray, means: np.ndarray, var: float) -> np.ndarray:
    """log N(y; mean_i, var*I) for each row of means."""
    m = means.shape[1]
    resid = means - y[None, :]
    return -0.5 * np.sum(resid * resid, axis=1) / var - 0.5 * m * math.log(2.0 * math.pi * var)


class ModelBase:
    """Mixin for concrete models: builds the generic StateSpaceModel wiring."""

    def obs_mean(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _observe_batch(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        mean = self.obs_mean(x)
        return mean + self.obs_std * gen.standard_normal(mean.shape)

    def _log_lik_batch(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return _rowwise_gaussian_log_lik(y, self.obs_mean(x), self.obs_std**2)

    def ssm(self) -> StateSpaceModel:
        raise NotImplementedError


@dataclass(frozen=True)
class StaticSquareModel(ModelBase):
    """Prior X ~ N(0, I_n), observation Y = 0.5*(X o X) + lam_w*W.

    The coordinate-wise square makes the posterior multimodal (one mode per
    sign pattern); lam_w controls how peaked the likelihood is.
    """

    dim: int = 2
    lam_w: float = 0.4

    def __post_init__(self):
        if self.lam_w <= 0:
            raise ValueError("lam_w must be > 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def obs_std(self) -> float:
        return self.lam_w

    def obs_mean(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * x * x

    def prior_sample(self, count: int, gen: np.random.Generator) -> np.ndarray:
        return gen.standard_normal((count, self.dim))

    def prior_log_density(self, x: np.ndarray) -> np.ndarray:
        return -0.5 * np.sum(x * x, axis=-1) - 0.5 * self.dim * math.log(2.0 * math.pi)

    def ssm(self) -> StateSpaceModel:
        return StateSpaceModel(
            state_dim=self.dim,
            obs_dim=self.dim,
            transition=lambda x, gen: self.prior_sample(x.shape[0], gen),
            observation=self._observe_batch,
            log_lik=self._log_lik_batch,
            initial=self.prior_sample,
            obs_noise_var=self.lam_w**2,
            name="static_square",
        )


@dataclass(frozen=True)
class BimodalPriorModel(ModelBase):
    """2-D prior 0.5*N(-mode*1, sigma^2 I) + 0.5*N(+mode*1, sigma^2 I) with a
    linear observation Y = X + sigma_w*W."""

    mode_offset: float = 1.0
    sigma: float = 0.4
    sigma_w: float = 0.4
    dim = 2

    def __post_init__(self):
        if self.sigma <= 0 or self.sigma_w <= 0:
            raise ValueError("sigma and sigma_w must be > 0")

    @property
    def obs_std(self) -> float:
        return self.sigma_w

    def obs_mean(self, x: np.ndarray) -> np.ndarray:
        return x

    def prior_sample(self, count: int, gen: np.random.Generator) -> np.ndarray:
        signs = 2.0 * gen.integers(0, 2, size=count).astype(np.float64) - 1.0
        return signs[:, None] * self.mode_offset + self.sigma * gen.standard_normal((count, self.dim))

    def prior_log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = -0.5 * self.dim * math.log(2.0 * math.pi * self.sigma**2)
        lo = -0.5 * np.sum((x - self.mode_offset) ** 2, axis=-1) / self.sigma**2
        hi = -0.5 * np.sum((x + self.mode_offset) ** 2, axis=-1) / self.sigma**2
        m = np.maximum(lo, hi)
        return c + math.log(0.5) + m + np.log(np.exp(lo - m) + np.exp(hi - m))

    def ssm(self) -> StateSpaceModel:
        return StateSpaceModel(
            state_dim=self.dim,
            obs_dim=self.dim,
            transition=lambda x, gen: self.prior_sample(x.shape[0], gen),
            observation=self._observe_batch,
            log_lik=self._log_lik_batch,
            initial=self.prior_sample,
            obs_noise_var=self.sigma_w**2,
            name="bimodal_prior",
        )


@dataclass(frozen=True)
class DynamicPolynomialModel(ModelBase):
    """AR(1) state with a polynomial observation:

        X_t = (1 - alpha) X_{t-1} + 2*lam*V_t,   X_0 ~ N(0, I_n)
        Y_t = X_t^(o p) + lam*W_t                (coordinate-wise power)

    p=2 gives the bimodal-posterior benchmark; p=1 and p=3 are the linear and
    cubic variants.
    """

    dim: int = 1
    alpha: float = 0.1
    lam: float = math.sqrt(0.1)
    obs_power: int = 2

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.obs_power not in (1, 2, 3):
            raise ValueError("obs_power must be 1, 2 or 3")

    @property
    def obs_std(self) -> float:
        return self.lam

    def obs_mean(self, x: np.ndarray) -> np.ndarray:
        return x**self.obs_power

    def transition_batch(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        return (1.0 - self.alpha) * x + 2.0 * self.lam * gen.standard_normal(x.shape)

    def prior_sample(self, count: int, gen: np.random.Generator) -> np.ndarray:
        return gen.standard_normal((count, self.dim))

    def ssm(self) -> StateSpaceModel:
        return StateSpaceModel(
            state_dim=self.dim,
            obs_dim=self.dim,
            transition=self.transition_batch,
            observation=self._observe_batch,
            log_lik=self._log_lik_batch,
            initial=self.prior_sample,
            obs_noise_var=self.lam**2,
            name="dynamic_polynomial",
        )


def lorenz63_rhs(x: np.ndarray, sigma: float = 10.0, rho: float = 28.0,
                 beta: float = 8.0 / 3.0) -> np.ndarray:
    """Lorenz 63 vector field; x has shape (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([sigma * (x2 - x1), x1 * (rho - x3) - x2, x1 * x2 - beta * x3], axis=-1)


def lorenz96_rhs(x: np.ndarray, forcing: float) -> np.ndarray:
    """Lorenz 96 vector field with cyclic indexing; x has shape (..., n), n >= 4.

    Component k: (x_{k+1} - x_{k-2}) * x_{k-1} - x_k + forcing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ValueError("lorenz96_rhs needs state dimension >= 4")
    xp1 = np.roll(x, -1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    return (xp1 - xm2) * xm1 - x + forcing


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite RK4 step (dt too large for this flow)")
    return out


@dataclass(frozen=True)
class Lorenz63Model(ModelBase):
    """Lorenz 63 twin experiment.

    The truth integrates the noiseless ODE; the filter-side transition adds
    N(0, sigma_added^2 I) after the RK4 substeps to keep the particle cloud
    from collapsing. Observations are (X(1), X(3)) + sigma_obs*W. Truth starts
    around mu0_truth, particles around mu0_particles, both with std sigma0.
    """

    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.02
    substeps: int = 1
    sigma_obs: float = math.sqrt(10.0)
    sigma_added: float = 1.0
    mu0_truth: Tuple[float, float, float] = (25.0, 25.0, 25.0)
    mu0_particles: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma0: float = math.sqrt(10.0)
    dim = 3

    @property
    def obs_std(self) -> float:
        return self.sigma_obs

    def obs_mean(self, x: np.ndarray) -> np.ndarray:
        return x[..., (0, 2)]

    def flow(self, x: np.ndarray) -> np.ndarray:
        for _ in range(self.substeps):
            x = rk4_step(lambda z: lorenz63_rhs(z, self.sigma, self.rho, self.beta), x, self.dt)
        return x

    def _truth_transition(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        return self.flow(x)

    def _filter_transition(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        return self.flow(x) + self.sigma_added * gen.standard_normal(x.shape)

    def _initial(self, mu):
        mu = np.asarray(mu, dtype=np.float64)
        return lambda count, gen: mu[None, :] + self.sigma0 * gen.standard_normal((count, 3))

    def ssm(self) -> StateSpaceModel:
        return StateSpaceModel(
            state_dim=3,
            obs_dim=2,
            transition=self._filter_transition,
            observation=self._observe_batch,
            log_lik=self._log_lik_batch,
            initial=self._initial(self.mu0_particles),
            obs_noise_var=self.sigma_obs**2,
            truth_transition=self._truth_transition,
            truth_initial=self._initial(self.mu0_truth),
            name="lorenz63",
        )


@dataclass(frozen=True)
class Lorenz96Model(ModelBase):
    """Lorenz 96 twin experiment on n=9 states with 6 observed components.

    Dynamics and observation noise share one std sigma; the dynamics noise is
    added once per assimilation interval, after the RK4 substeps, for both the
    truth and the filters.
    """

    dim: int = 9
    forcing: float = 2.0
    dt: float = 0.01
    substeps: int = 5
    sigma: float = 1.0
    obs_indices: Tuple[int, ...] = (0, 1, 3, 4, 6, 7)
    mu0: float = 25.0
    sigma0: float = 10.0

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("dim must be >= 4")
        if any(i < 0 or i >= self.dim for i in self.obs_indices):
            raise ValueError("obs_indices out of range")

    @property
    def obs_std(self) -> float:
        return self.sigma

    def obs_mean(self, x: np.ndarray) -> np.ndarray:
        return x[..., list(self.obs_indices)]

    def flow(self, x: np.ndarray) -> np.ndarray:
        for _ in range(self.substeps):
            x = rk4_step(lambda z: lorenz96_rhs(z, self.forcing), x, self.dt)
        return x

    def _transition(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        return self.flow(x) + self.sigma * gen.standard_normal(x.shape)

    def _initial(self, count: int, gen: np.random.Generator) -> np.ndarray:
        return self.mu0 + self.sigma0 * gen.standard_normal((count, self.dim))

    def ssm(self) -> StateSpaceModel:
        return StateSpaceModel(
            state_dim=self.dim,
            obs_dim=len(self.obs_indices),
            transition=self._transition,
            observation=self._observe_batch,
            log_lik=self._log_lik_batch,
            initial=self._initial,
            obs_noise_var=self.sigma**2,
            name="lorenz96",
        )


def polynomial_dynamic_step(model: DynamicPolynomialModel, x: np.ndarray,
                            rng: RandomSource) -> np.ndarray:
    """One AR(1) transition draw (1-alpha)x + 2*lam*V for a state vector or a
    batch of states."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = model.transition_batch(x[None, :] if single else x, rng.generator())
    return out[0] if single else out


def as_state_space(model: ModelLike) -> StateSpaceModel:
    return model if isinstance(model, StateSpaceModel) else model.ssm()


def observe(model: ModelLike, x: np.ndarray, rng: RandomSource) -> np.ndarray:
    """Draw y ~ h(.|x) for a single state vector (or a batch of them)."""
    ssm = as_state_space(model)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = ssm.observation(x[None, :] if single else x, rng.generator())
    return out[0] if single else out


def log_likelihood(model: ModelLike, y: np.ndarray, x: np.ndarray):
    """log h(y|x) for a single state vector, or row-wise for a batch."""
    ssm = as_state_space(model)
    if ssm.log_lik is None:
        raise ValueError(f"model {ssm.name or '<anonymous>'} has no observation density")
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = ssm.log_lik(y, x[None, :] if single else x)
    return float(out[0]) if single else out


def prior_ensemble(model: ModelLike, count: int, rng: RandomSource) -> Ensemble:
    """Draw an initial particle cloud from the model's particle prior."""
    ssm = as_state_space(model)
    if ssm.initial is None:
        raise ValueError("model has no initial-distribution sampler")
    return Ensemble(ssm.initial(count, rng.generator()))
