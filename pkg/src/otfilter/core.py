"""Shared types for particle filtering: random streams, ensembles, state-space
models, and the simulation loops every filter consumes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


def _fold64(state: int, key: int) -> int:
    """Mix a 64-bit key into a 64-bit state (splitmix64-style avalanche)."""
    z = (state + 0x9E3779B97F4A7C15 * ((key & _MASK64) + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    if isinstance(label, str):
        # FNV-1a, stable across runs (unlike builtin hash).
        h = 0xCBF29CE484222325
        for b in label.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        return h
    raise TypeError(f"stream label must be int or str, got {type(label).__name__}")


@dataclass(frozen=True)
class RandomSource:
    """Immutable handle on a counter-based random stream.

    Identical (seed, stream_id) pairs always reproduce the same draws, and
    distinct stream_ids fork independent streams from one seed, so children
    can be handed to sub-tasks in any order without coupling their samples.
    """

    seed: int
    stream_id: int = 0

    def child(self, *path) -> "RandomSource":
        """Fork an independent stream; path elements may be ints or strings."""
        sid = self.stream_id & _MASK64
        for label in path:
            sid = _fold64(sid, _label_to_int(label))
        return RandomSource(self.seed, sid)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = ((self.stream_id & _MASK64) << 64) | (self.seed & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Ensemble:
    """Particle cloud: rows of `particles` are particles in R^n.

    `weights` is None for the uniform (unweighted) case; when present it must
    be a length-N nonnegative vector summing to one within 1e-12. Arrays are
    copied and frozen, so an Ensemble is a value.
    """

    particles: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError(f"particles must be 2-D (N, n), got shape {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"need N >= 1 and n >= 1, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("particles contain non-finite entries")
        object.__setattr__(self, "particles", _freeze(p))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (p.shape[0],):
                raise ValueError(
                    f"weights shape {w.shape} does not match N={p.shape[0]}"
                )
            if not np.all(np.isfinite(w)):
                raise ValueError("weights contain non-finite entries")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights must sum to 1 within 1e-12, got {w.sum()!r}")
            object.__setattr__(self, "weights", _freeze(w))

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def mean(self) -> np.ndarray:
        if self.weights is None:
            return self.particles.mean(axis=0)
        return self.weights @ self.particles


@dataclass(frozen=True)
class StateSpaceModel:
    """Sampling form of a hidden Markov model.

    transition / observation samplers act on particle batches (N, n) with a
    Generator; log_lik evaluates log h(y | x) row-wise and is None for models
    without a density. truth_transition / truth_initial cover models whose
    simulated ground truth differs from the kernel the filters use (noiseless
    reference dynamics, a different initial spread); they default to the
    filter-side samplers.
    """

    state_dim: int
    obs_dim: int
    transition: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    observation: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    log_lik: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    initial: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None
    obs_noise_var: Optional[float] = None
    truth_transition: Optional[Callable] = None
    truth_initial: Optional[Callable] = None
    name: str = ""

    def truth_transition_fn(self):
        return self.truth_transition if self.truth_transition is not None else self.transition

    def truth_initial_fn(self):
        return self.truth_initial if self.truth_initial is not None else self.initial


@dataclass(frozen=True)
class Trajectory:
    """Simulated truth record: states[t] is X_t for t = 0..T (row 0 is the
    initial state), observations[t-1] is Y_t for t = 1..T."""

    states: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        o = np.asarray(self.observations, dtype=np.float64)
        if s.ndim != 2 or o.ndim != 2:
            raise ValueError("states and observations must be 2-D")
        if s.shape[0] != o.shape[0] + 1:
            raise ValueError(
                f"need one more state row than observation rows, got {s.shape[0]} vs {o.shape[0]}"
            )
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(o))):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", _freeze(s))
        object.__setattr__(self, "observations", _freeze(o))

    @property
    def steps(self) -> int:
        return self.observations.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.steps + 1)


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} produced non-finite values (model blow-up)")
    return x


def _per_particle_apply(fn, particles: np.ndarray, rng: RandomSource,
                        particle_keys: Sequence[int]) -> np.ndarray:
    if len(particle_keys) != particles.shape[0]:
        raise ValueError("particle_keys length must match particle count")
    rows = [fn(particles[i : i + 1], rng.child(int(k)).generator())
            for i, k in enumerate(particle_keys)]
    return np.concatenate(rows, axis=0)


def propagate_ensemble(model: StateSpaceModel, ens: Ensemble, rng: RandomSource,
                       particle_keys: Optional[Sequence[int]] = None) -> Ensemble:
    """Draw X^i ~ a(.|X^i) independently for every particle.

    Requires an unweighted ensemble (resample first). The default path uses
    one vectorized draw from this call's stream; passing particle_keys assigns
    each particle its own substream child(key_i), which makes propagation
    commute with particle permutations.
    """
    if ens.weights is not None:
        raise ValueError("propagate_ensemble requires an unweighted ensemble")
    if ens.dim != model.state_dim:
        raise ValueError(f"ensemble dim {ens.dim} != model state_dim {model.state_dim}")
    if particle_keys is None:
        out = model.transition(ens.particles, rng.generator())
    else:
        out = _per_particle_apply(model.transition, ens.particles, rng, particle_keys)
    out = np.asarray(out, dtype=np.float64)
    if out.shape != ens.particles.shape:
        raise ValueError(f"transition returned shape {out.shape}, expected {ens.particles.shape}")
    return Ensemble(_check_finite(out, "transition"))


def sample_observation_ensemble(model: StateSpaceModel, ens: Ensemble, rng: RandomSource,
                                particle_keys: Optional[Sequence[int]] = None) -> np.ndarray:
    """Simulate one observation Y^i ~ h(.|X^i) per particle; returns (N, m)."""
    if ens.weights is not None:
        raise ValueError("sample_observation_ensemble requires an unweighted ensemble")
    if ens.dim != model.state_dim:
        raise ValueError(f"ensemble dim {ens.dim} != model state_dim {model.state_dim}")
    if particle_keys is None:
        out = model.observation(ens.particles, rng.generator())
    else:
        out = _per_particle_apply(model.observation, ens.particles, rng, particle_keys)
    out = np.asarray(out, dtype=np.float64)
    if out.shape != (ens.size, model.obs_dim):
        raise ValueError(f"observation returned shape {out.shape}, expected {(ens.size, model.obs_dim)}")
    return _check_finite(out, "observation")


def simulate_truth(model: StateSpaceModel, steps: int, rng: RandomSource) -> Trajectory:
    """Simulate a ground-truth trajectory: X_0 ~ pi_0, then alternate the
    truth-side transition and observation kernels for `steps` steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    init = model.truth_initial_fn()
    if init is None:
        raise ValueError("model has no initial-distribution sampler")
    transition = model.truth_transition_fn()
    x = np.asarray(init(1, rng.child("init").generator()), dtype=np.float64)
    if x.shape != (1, model.state_dim):
        raise ValueError(f"initial sampler returned shape {x.shape}")
    states = [x[0].copy()]
    observations = []
    for t in range(1, steps + 1):
        x = np.asarray(transition(x, rng.child("dyn", t).generator()), dtype=np.float64)
        _check_finite(x, f"truth transition at step {t}")
        y = np.asarray(model.observation(x, rng.child("obs", t).generator()), dtype=np.float64)
        _check_finite(y, f"truth observation at step {t}")
        states.append(x[0].copy())
        observations.append(y[0].copy())
    return Trajectory(np.stack(states), np.stack(observations))
