"""Experiment orchestration: JSON experiment specs, paired-truth runs of the
three filters, dimension/particle/budget sweeps, and deterministic CSV/JSON
artifacts (metrics.csv, truth.csv, particles.csv, traces.csv, sweep.csv,
manifest.json)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._version import __version__
from .core import Ensemble, RandomSource, StateSpaceModel, Trajectory, simulate_truth
from .filters import (
    EnKFConfig,
    FilterRun,
    FilterState,
    METHODS,
    MethodConfig,
    OTPFConfig,
    SIRConfig,
    filter_step,
    init_state,
    propagate_ensemble,
)
from .metrics import (
    METRIC_NAMES,
    MetricRow,
    MetricSeries,
    MmdConfig,
    ess_series,
    median_bandwidth,
    mmd_series,
    mode_balance_series,
    state_mse,
)
from .models import (
    BimodalPriorModel,
    DynamicPolynomialModel,
    Lorenz63Model,
    Lorenz96Model,
    StaticSquareModel,
    as_state_space,
)
from .oracle import (
    LinearGaussianSpec,
    default_grid,
    exact_kalman_posterior,
    grid_bayes_update,
    grid_sample,
    reference_sir_posterior,
)

SCHEMA_VERSION = 1

METRICS_HEADER = "time_index,method,metric,value,run_id"

PARTICLES_VALUE_LIMIT = 10**7

REFERENCE_SUBSAMPLE = 2000

_SPEC_FIELDS = ("schema_version", "experiment", "model", "methods", "particles",
                "steps", "seeds", "metrics", "reference", "out_dir")

_REQUIRED_FIELDS = ("model", "methods", "particles", "steps", "seeds")

# model id -> (class, parameters fixed by the id itself)
MODEL_REGISTRY = {
    "static_square": (StaticSquareModel, {}),
    "bimodal_prior": (BimodalPriorModel, {}),
    "dynamic_bimodal": (DynamicPolynomialModel, {"obs_power": 2}),
    "dynamic_linear": (DynamicPolynomialModel, {"obs_power": 1}),
    "dynamic_cubic": (DynamicPolynomialModel, {"obs_power": 3}),
    "dynamic_polynomial": (DynamicPolynomialModel, {}),
    "lorenz63": (Lorenz63Model, {}),
    "lorenz96": (Lorenz96Model, {}),
}

_METHOD_CONFIGS = {"enkf": EnKFConfig, "sir": SIRConfig, "otpf": OTPFConfig}

SWEEP_AXES = ("dimension", "particles", "train_budget")

SWEEP_HEADER = "axis,value,method,metric,mean,stderr,wall_seconds"


class SpecError(ValueError):
    """Experiment-spec validation failure; the message names the bad path."""


@dataclass(frozen=True)
class MethodSpec:
    name: str
    overrides: Dict[str, object]

    def build(self) -> MethodConfig:
        return _METHOD_CONFIGS[self.name](**self.overrides)


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    model_id: str
    model_params: Dict[str, object]
    methods: Tuple[MethodSpec, ...]
    particles: int
    steps: int
    seeds: Tuple[int, ...]
    metrics: Tuple[str, ...]
    reference: str
    out_dir: str
    schema_version: int = SCHEMA_VERSION

    def build_model(self):
        cls, fixed = MODEL_REGISTRY[self.model_id]
        return cls(**fixed, **self.model_params)

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "model": {"id": self.model_id, "params": dict(self.model_params)},
            "methods": [{"name": m.name, "config": dict(m.overrides)} for m in self.methods],
            "particles": self.particles,
            "steps": self.steps,
            "seeds": list(self.seeds),
            "metrics": list(self.metrics),
            "reference": self.reference,
            "out_dir": self.out_dir,
        }


def _expect(cond: bool, path: str, msg: str):
    if not cond:
        raise SpecError(f"{path}: {msg}")


def _validate_params(path: str, cls, fixed: Dict[str, object], params: Dict[str, object]):
    allowed = {f.name for f in dataclasses.fields(cls)} - set(fixed)
    for key in params:
        _expect(key in allowed, f"{path}.{key}",
                f"unknown parameter for {cls.__name__} (allowed: {sorted(allowed)})")


def _parse_model(raw) -> Tuple[str, Dict[str, object]]:
    if isinstance(raw, str):
        model_id, params = raw, {}
    elif isinstance(raw, dict):
        extra = set(raw) - {"id", "params"}
        _expect(not extra, f"model.{sorted(extra)[0]}" if extra else "model", "unknown field")
        _expect("id" in raw, "model.id", "missing required field")
        model_id = raw["id"]
        params = raw.get("params", {})
        _expect(isinstance(params, dict), "model.params", "must be an object")
    else:
        raise SpecError("model: must be a string id or an object {id, params}")
    _expect(isinstance(model_id, str), "model.id", "must be a string")
    _expect(model_id in MODEL_REGISTRY, "model.id",
            f"unknown model {model_id!r} (known: {sorted(MODEL_REGISTRY)})")
    cls, fixed = MODEL_REGISTRY[model_id]
    _validate_params("model.params", cls, fixed, params)
    return model_id, dict(params)


def _parse_method(raw, idx: int) -> MethodSpec:
    path = f"methods[{idx}]"
    if isinstance(raw, str):
        name, overrides = raw, {}
    elif isinstance(raw, dict):
        extra = set(raw) - {"name", "config"}
        _expect(not extra, f"{path}.{sorted(extra)[0]}" if extra else path, "unknown field")
        _expect("name" in raw, f"{path}.name", "missing required field")
        name = raw["name"]
        overrides = raw.get("config", {})
        _expect(isinstance(overrides, dict), f"{path}.config", "must be an object")
    else:
        raise SpecError(f"{path}: must be a method name or an object {{name, config}}")
    _expect(isinstance(name, str) and name in METHODS, f"{path}.name",
            f"unknown method {name!r} (known: {METHODS})")
    cls = _METHOD_CONFIGS[name]
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in overrides:
        _expect(key in allowed, f"{path}.config.{key}",
                f"unknown option for {name} (allowed: {sorted(allowed)})")
    return MethodSpec(name, dict(overrides))


def _default_reference(model_id: str) -> str:
    if model_id in ("static_square", "bimodal_prior"):
        return "grid"
    if model_id.startswith("dynamic"):
        return "sir_1e5"
    return "none"


def _reference_count(reference: str) -> Optional[int]:
    """Particle count behind a SIR reference tag, None for non-SIR tags."""
    if reference == "sir_1e5":
        return 100000
    if reference.startswith("sir:"):
        try:
            count = int(reference[4:])
        except ValueError:
            raise SpecError(f"reference: malformed SIR tag {reference!r}")
        _expect(count >= 2, "reference", "SIR reference needs at least 2 particles")
        return count
    return None


def validate_spec_dict(raw: Dict[str, object]) -> ExperimentSpec:
    _expect(isinstance(raw, dict), "<root>", "spec must be a JSON object")
    for key in raw:
        _expect(key in _SPEC_FIELDS, key, "unknown field")
    for key in _REQUIRED_FIELDS:
        _expect(key in raw, key, "missing required field")
    schema = raw.get("schema_version", SCHEMA_VERSION)
    _expect(schema == SCHEMA_VERSION, "schema_version",
            f"unsupported version {schema!r} (this build reads {SCHEMA_VERSION})")

    model_id, model_params = _parse_model(raw["model"])

    _expect(isinstance(raw["methods"], list), "methods", "must be a list")
    methods = tuple(_parse_method(m, i) for i, m in enumerate(raw["methods"]))
    names = [m.name for m in methods]
    _expect(len(set(names)) == len(names), "methods", "duplicate method names")

    particles = raw["particles"]
    _expect(isinstance(particles, int) and particles >= 2, "particles", "must be an integer >= 2")
    steps = raw["steps"]
    _expect(isinstance(steps, int) and steps >= 1, "steps", "must be an integer >= 1")

    seeds = raw["seeds"]
    _expect(isinstance(seeds, list) and len(seeds) > 0, "seeds", "must be a nonempty list")
    for i, s in enumerate(seeds):
        _expect(isinstance(s, int), f"seeds[{i}]", "must be an integer")
    _expect(len(set(seeds)) == len(seeds), "seeds", "duplicate seeds")

    reference = raw.get("reference", _default_reference(model_id))
    _expect(isinstance(reference, str), "reference", "must be a string")
    if not (reference in ("grid", "sir_1e5", "kalman", "none") or reference.startswith("sir:")):
        raise SpecError(f"reference: unknown reference {reference!r}")
    _reference_count(reference)

    default_metrics = ["mse", "ess"] + (["mmd2"] if reference != "none" else [])
    metrics = raw.get("metrics", default_metrics)
    _expect(isinstance(metrics, list) and metrics, "metrics", "must be a nonempty list")
    for i, m in enumerate(metrics):
        _expect(m in METRIC_NAMES, f"metrics[{i}]",
                f"unknown metric {m!r} (known: {METRIC_NAMES})")
    _expect("wall_seconds" not in metrics, "metrics",
            "wall_seconds is recorded in the manifest, not requested here")
    if "mmd2" in metrics:
        _expect(reference != "none", "metrics", "mmd2 requires a reference")

    if reference == "grid":
        _expect(steps == 1, "reference", "grid reference requires steps = 1")
        _expect(model_id in ("static_square", "bimodal_prior"), "reference",
                "grid reference requires a static model with a prior density")
    if reference == "kalman":
        _expect(model_id == "dynamic_linear", "reference",
                "kalman reference requires the linear-Gaussian dynamic model")

    out_dir = raw.get("out_dir", os.environ.get("OTFILTER_OUT", "out"))
    _expect(isinstance(out_dir, str) and out_dir, "out_dir", "must be a nonempty string")

    experiment = raw.get("experiment", model_id)
    _expect(isinstance(experiment, str) and experiment, "experiment", "must be a nonempty string")

    spec = ExperimentSpec(
        experiment=experiment,
        model_id=model_id,
        model_params=model_params,
        methods=methods,
        particles=particles,
        steps=steps,
        seeds=tuple(seeds),
        metrics=tuple(metrics),
        reference=reference,
        out_dir=out_dir,
        schema_version=SCHEMA_VERSION,
    )
    try:
        spec.build_model()
        for m in methods:
            m.build()
    except (TypeError, ValueError) as exc:
        raise SpecError(f"spec rejected while constructing components: {exc}") from exc
    return spec


def load_experiment_spec(path) -> ExperimentSpec:
    p = Path(path)
    if not p.is_file():
        raise SpecError(f"{p}: no such config file")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecError(f"{p}: not valid JSON ({exc})") from exc
    return validate_spec_dict(raw)


def _fmt(value: float) -> str:
    return repr(float(value))


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(text.encode("utf-8"))
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _array_checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def _kalman_reference(model: DynamicPolynomialModel, traj: Trajectory, count: int,
                      rng: RandomSource) -> Tuple[np.ndarray, ...]:
    """Per-step Gaussian samples from the exact Kalman recursion (linear
    observation only)."""
    if model.obs_power != 1:
        raise ValueError("kalman reference requires a linear observation model")
    n = model.dim
    a = 1.0 - model.alpha
    q = (2.0 * model.lam) ** 2
    r = model.lam**2
    eye = np.eye(n)
    mean = np.zeros(n)
    cov = eye.copy()
    gen = rng.generator()
    sets = [gen.standard_normal((count, n))]
    for t in range(traj.steps):
        mean = a * mean
        cov = a * a * cov + q * eye
        mean, cov = exact_kalman_posterior(
            LinearGaussianSpec(mean, cov, eye, r * eye), traj.observations[t])
        draw = mean + gen.standard_normal((count, n)) @ np.linalg.cholesky(cov).T
        sets.append(draw)
    return tuple(sets)


def _grid_reference(spec: ExperimentSpec, model, traj: Trajectory,
                    rng: RandomSource) -> Tuple[np.ndarray, ...]:
    ssm = as_state_space(model)
    if spec.model_id == "static_square":
        prior_std = 1.0
    else:
        prior_std = float(np.sqrt(model.sigma**2 + model.mode_offset**2))
    gspec = default_grid(ssm.state_dim, prior_std)
    posterior = grid_bayes_update(lambda pts: np.exp(model.prior_log_density(pts)),
                                  ssm, traj.observations[0], gspec)
    prior_draw = ssm.initial(REFERENCE_SUBSAMPLE, rng.child("prior").generator())
    post_draw = grid_sample(posterior, REFERENCE_SUBSAMPLE, rng.child("post"))
    return (np.asarray(prior_draw, dtype=np.float64), post_draw)


def _build_reference(spec: ExperimentSpec, model, traj: Trajectory,
                     rng: RandomSource) -> Optional[Tuple[np.ndarray, ...]]:
    if spec.reference == "none":
        return None
    if spec.reference == "grid":
        return _grid_reference(spec, model, traj, rng)
    if spec.reference == "kalman":
        return _kalman_reference(model, traj, REFERENCE_SUBSAMPLE, rng)
    count = _reference_count(spec.reference)
    return reference_sir_posterior(model, traj, count, rng,
                                   subsample_to=REFERENCE_SUBSAMPLE)


def _timed_filter_run(method: MethodSpec, ssm: StateSpaceModel, traj: Trajectory,
                      particles: int, rng: RandomSource):
    """run_filter with per-step wall timing; conditioning time is the step
    minus a separately measured propagation (the filter redraws the identical
    propagation from the same substream, so the subtraction is exact up to
    timer noise)."""
    t_start = time.perf_counter()
    cfg = method.build()
    state: FilterState = init_state(method.name, ssm, particles, cfg, rng)
    n_steps = traj.steps
    states = np.empty((n_steps + 1, particles, ssm.state_dim))
    weights = np.empty((n_steps + 1, particles))
    ess = np.empty(n_steps)
    walls = np.empty(n_steps)
    traces: List[np.ndarray] = []
    states[0] = state.ensemble.particles
    weights[0] = 1.0 / particles
    conditioning = 0.0
    for t in range(n_steps):
        step_rng = rng.child("step", t)
        tp0 = time.perf_counter()
        propagate_ensemble(ssm, Ensemble(state.ensemble.particles), step_rng.child("prop"))
        tp1 = time.perf_counter()
        state = filter_step(method.name, state, traj.observations[t], ssm, step_rng)
        tp2 = time.perf_counter()
        walls[t] = tp2 - tp1
        conditioning += max((tp2 - tp1) - (tp1 - tp0), 0.0)
        states[t + 1] = state.ensemble.particles
        w = state.ensemble.weights
        weights[t + 1] = 1.0 / particles if w is None else w
        ess[t] = state.last_ess
        if state.last_trace is not None:
            traces.append(state.last_trace)
    run = FilterRun(method=method.name, model_name=ssm.name, states=states,
                    weights=weights, ess=ess, wall_seconds=walls,
                    traces=tuple(traces), config=cfg)
    return run, time.perf_counter() - t_start, conditioning


def _collect_metrics(spec: ExperimentSpec, run: FilterRun, traj: Trajectory,
                     reference, mmd_cfg: Optional[MmdConfig], seed: int) -> MetricSeries:
    series = MetricSeries(())
    for metric in spec.metrics:
        if metric == "mse":
            series = series + state_mse(run, traj, run_id=seed)
        elif metric == "ess":
            series = series + ess_series(run, run_id=seed)
        elif metric == "mode_balance":
            series = series + mode_balance_series(run, run_id=seed)
        elif metric == "mmd2":
            series = series + mmd_series(run, reference, mmd_cfg, run_id=seed)
    return series


def _metrics_csv(rows: Sequence[MetricRow], method_order: Sequence[str],
                 metric_order: Sequence[str]) -> str:
    method_rank = {m: i for i, m in enumerate(method_order)}
    metric_rank = {m: i for i, m in enumerate(metric_order)}
    ordered = sorted(rows, key=lambda r: (r.run_id, method_rank[r.method],
                                          metric_rank[r.metric], r.time_index))
    lines = [METRICS_HEADER]
    lines += [f"{r.time_index},{r.method},{r.metric},{_fmt(r.value)},{r.run_id}"
              for r in ordered]
    return "\n".join(lines) + "\n"


def _truth_csv(truths: Dict[int, Trajectory]) -> str:
    lines = ["time_index,kind,axis,value,run_id"]
    for seed in sorted(truths):
        traj = truths[seed]
        for t in range(traj.states.shape[0]):
            for k in range(traj.states.shape[1]):
                lines.append(f"{t},state,{k},{_fmt(traj.states[t, k])},{seed}")
        for t in range(traj.observations.shape[0]):
            for k in range(traj.observations.shape[1]):
                lines.append(f"{t + 1},obs,{k},{_fmt(traj.observations[t, k])},{seed}")
    return "\n".join(lines) + "\n"


def _particles_csv(runs: Dict[Tuple[str, int], FilterRun]) -> Optional[str]:
    total = sum(r.states.size for r in runs.values())
    if total > PARTICLES_VALUE_LIMIT:
        return None
    dim = next(iter(runs.values())).states.shape[2] if runs else 0
    coords = ",".join(f"x{k}" for k in range(dim))
    lines = [f"time_index,method,particle_index,{coords},run_id"]
    for method, seed in sorted(runs, key=lambda ms: (ms[1], ms[0])):
        run = runs[(method, seed)]
        for t in range(run.states.shape[0]):
            for i in range(run.states.shape[1]):
                vals = ",".join(_fmt(v) for v in run.states[t, i])
                lines.append(f"{t},{method},{i},{vals},{seed}")
    return "\n".join(lines) + "\n"


def _traces_csv(runs: Dict[Tuple[str, int], FilterRun]) -> Optional[str]:
    lines = ["run_id,method,step_index,outer_iter,objective,map_loss,potential_term"]
    found = False
    for method, seed in sorted(runs, key=lambda ms: (ms[1], ms[0])):
        run = runs[(method, seed)]
        for step_idx, trace in enumerate(run.traces):
            found = True
            for row in trace:
                vals = ",".join(_fmt(v) for v in row[1:4])
                lines.append(f"{seed},{method},{step_idx + 1},{int(row[0])},{vals}")
    if not found:
        return None
    return "\n".join(lines) + "\n"


def run_experiment(spec: ExperimentSpec, out_dir: Optional[str] = None) -> Dict[str, object]:
    """Execute every (seed, method) cell of the spec and write the artifact
    set; returns the manifest (also written as manifest.json).

    Within a seed all methods filter the same truth trajectory. Failures are
    recorded per cell without aborting the rest.
    """
    out = Path(out_dir if out_dir is not None else spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = spec.build_model()
    ssm = as_state_space(model)

    truths: Dict[int, Trajectory] = {}
    references: Dict[int, object] = {}
    runs: Dict[Tuple[str, int], FilterRun] = {}
    all_rows: List[MetricRow] = []
    run_records: List[Dict[str, object]] = []
    errors: List[Dict[str, object]] = []
    mmd_cfg: Optional[MmdConfig] = None
    total_start = time.perf_counter()

    for seed in spec.seeds:
        root = RandomSource(seed)
        try:
            truths[seed] = simulate_truth(ssm, spec.steps, root.child("truth"))
            if spec.reference != "none":
                references[seed] = _build_reference(spec, model, truths[seed],
                                                    root.child("reference"))
        except Exception as exc:  # noqa: BLE001 - cell isolation by contract
            errors.append({"method": "*", "seed": seed, "error": str(exc)})

    if "mmd2" in spec.metrics and references:
        # bandwidth frozen per experiment: median heuristic on the first
        # available seed's reference samples, pooled across steps
        first_ref = references[min(references)]
        pooled = np.concatenate([np.asarray(s) for s in first_ref], axis=0)
        mmd_cfg = MmdConfig(median_bandwidth(pooled), "median-heuristic")

    for seed in spec.seeds:
        if seed not in truths or (spec.reference != "none" and seed not in references):
            continue
        root = RandomSource(seed)
        for method in spec.methods:
            try:
                run, wall, conditioning = _timed_filter_run(
                    method, ssm, truths[seed], spec.particles,
                    root.child("filter", method.name))
                rows = _collect_metrics(spec, run, truths[seed],
                                        references.get(seed), mmd_cfg, seed)
                runs[(method.name, seed)] = run
                all_rows.extend(rows.rows)
                run_records.append({
                    "method": method.name,
                    "seed": seed,
                    "wall_seconds": wall,
                    "conditioning_seconds": conditioning,
                    "steps": spec.steps,
                    "particles": spec.particles,
                })
            except Exception as exc:  # noqa: BLE001 - cell isolation by contract
                errors.append({"method": method.name, "seed": seed, "error": str(exc)})

    files: List[Path] = []
    metrics_path = out / "metrics.csv"
    _atomic_write(metrics_path, _metrics_csv(all_rows, [m.name for m in spec.methods],
                                             spec.metrics))
    files.append(metrics_path)

    truth_path = out / "truth.csv"
    _atomic_write(truth_path, _truth_csv(truths))
    files.append(truth_path)

    particles_text = _particles_csv(runs)
    if particles_text is not None:
        particles_path = out / "particles.csv"
        _atomic_write(particles_path, particles_text)
        files.append(particles_path)

    traces_text = _traces_csv(runs)
    if traces_text is not None:
        traces_path = out / "traces.csv"
        _atomic_write(traces_path, traces_text)
        files.append(traces_path)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "spec": spec.to_dict(),
        "truth_checksums": {str(seed): _array_checksum(truths[seed].states,
                                                       truths[seed].observations)
                            for seed in sorted(truths)},
        "mmd_bandwidth": None if mmd_cfg is None else mmd_cfg.bandwidth,
        "runs": run_records,
        "errors": errors,
        "total_wall_seconds": time.perf_counter() - total_start,
        "files": [{"name": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size}
                  for p in files],
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


def _apply_axis(spec: ExperimentSpec, axis: str, value: int) -> ExperimentSpec:
    if axis == "dimension":
        cls, fixed = MODEL_REGISTRY[spec.model_id]
        allowed = {f.name for f in dataclasses.fields(cls)} - set(fixed)
        if "dim" not in allowed:
            raise SpecError(f"axis dimension: model {spec.model_id} has no dim parameter")
        params = dict(spec.model_params)
        params["dim"] = int(value)
        return dataclasses.replace(spec, model_params=params)
    if axis == "particles":
        return dataclasses.replace(spec, particles=int(value))
    if axis == "train_budget":
        methods = []
        touched = False
        for m in spec.methods:
            if m.name == "otpf":
                overrides = dict(m.overrides)
                overrides["outer_init"] = int(value)
                methods.append(MethodSpec(m.name, overrides))
                touched = True
            else:
                methods.append(m)
        if not touched:
            raise SpecError("axis train_budget: spec has no otpf method")
        return dataclasses.replace(spec, methods=tuple(methods))
    raise SpecError(f"axis: unknown axis {axis!r} (known: {SWEEP_AXES})")


def sweep(spec: ExperimentSpec, axis: str, values: Sequence[int],
          out_dir: Optional[str] = None) -> Dict[str, object]:
    """Run the spec once per axis value and aggregate time-averaged metrics
    (mean and across-seed standard error) into sweep.csv."""
    if axis not in SWEEP_AXES:
        raise SpecError(f"axis: unknown axis {axis!r} (known: {SWEEP_AXES})")
    if not values:
        raise SpecError("values: must be nonempty")
    out = Path(out_dir if out_dir is not None else spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = [SWEEP_HEADER]
    cell_manifests = []
    for value in values:
        cell_spec = _apply_axis(spec, axis, value)
        cell_dir = out / f"{axis}_{value}"
        manifest = run_experiment(cell_spec, out_dir=str(cell_dir))
        cell_manifests.append({"value": value, "dir": cell_dir.name,
                               "errors": manifest["errors"]})
        rows = _read_metrics_csv(cell_dir / "metrics.csv")
        walls = {}
        for rec in manifest["runs"]:
            walls.setdefault(rec["method"], []).append(rec["wall_seconds"])
        for method in [m.name for m in cell_spec.methods]:
            for metric in cell_spec.metrics:
                per_seed = []
                for seed in cell_spec.seeds:
                    vals = [r.value for r in rows
                            if r.method == method and r.metric == metric and r.run_id == seed]
                    if vals:
                        per_seed.append(float(np.mean(vals)))
                if not per_seed:
                    continue
                mean = float(np.mean(per_seed))
                stderr = (float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed)))
                          if len(per_seed) > 1 else 0.0)
                wall = float(np.mean(walls.get(method, [np.nan])))
                lines.append(f"{axis},{value},{method},{metric},"
                             f"{_fmt(mean)},{_fmt(stderr)},{_fmt(wall)}")

    sweep_path = out / "sweep.csv"
    _atomic_write(sweep_path, "\n".join(lines) + "\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "spec": spec.to_dict(),
        "axis": axis,
        "values": list(values),
        "cells": cell_manifests,
        "files": [{"name": sweep_path.name, "sha256": _sha256(sweep_path),
                   "bytes": sweep_path.stat().st_size}],
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


def _read_metrics_csv(path: Path) -> List[MetricRow]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    rows = []
    for line in lines[1:]:
        t, method, metric, value, run_id = line.split(",")
        rows.append(MetricRow(int(t), method, metric, float(value), int(run_id)))
    return rows


def report(manifest_path) -> str:
    """Markdown timing/accuracy table built from a run's artifacts: one row
    per method with time-averaged metrics (mean +/- stderr across seeds) and
    mean wall/conditioning seconds."""
    mpath = Path(manifest_path)
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if "runs" not in manifest:
        raise ValueError("report expects a run_experiment manifest (sweeps aggregate already)")
    spec = manifest["spec"]
    rows = _read_metrics_csv(mpath.parent / "metrics.csv")
    methods = [m["name"] for m in spec["methods"]]
    metrics = list(spec["metrics"])
    walls: Dict[str, List[float]] = {}
    conds: Dict[str, List[float]] = {}
    for rec in manifest["runs"]:
        walls.setdefault(rec["method"], []).append(rec["wall_seconds"])
        conds.setdefault(rec["method"], []).append(rec["conditioning_seconds"])

    header = ("| method | " + " | ".join(metrics)
              + " | wall seconds | conditioning seconds |")
    sep = "|" + "---|" * (len(metrics) + 3)
    lines = [f"# {spec['experiment']}", "",
             f"model: {spec['model']['id']}, N={spec['particles']}, "
             f"steps={spec['steps']}, seeds={spec['seeds']}", "",
             header, sep]
    for method in methods:
        cells = [method]
        for metric in metrics:
            per_seed = []
            for seed in spec["seeds"]:
                vals = [r.value for r in rows
                        if r.method == method and r.metric == metric and r.run_id == seed]
                if vals:
                    per_seed.append(float(np.mean(vals)))
            if not per_seed:
                cells.append("-")
                continue
            mean = float(np.mean(per_seed))
            stderr = (float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed)))
                      if len(per_seed) > 1 else 0.0)
            cells.append(f"{mean:.6g} +/- {stderr:.2g}")
        cells.append(f"{np.mean(walls.get(method, [np.nan])):.3g}")
        cells.append(f"{np.mean(conds.get(method, [np.nan])):.3g}")
        lines.append("| " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    _atomic_write(mpath.parent / "report.md", text)
    return text
