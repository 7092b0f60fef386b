"""Nonlinear filtering toolkit: ensemble Kalman, sequential importance
resampling, and conditional optimal-transport particle filters, with exact
posterior oracles, MMD/MSE evaluation, and an experiment harness."""

from ._version import __version__
from .core import (
    Ensemble,
    RandomSource,
    StateSpaceModel,
    Trajectory,
    propagate_ensemble,
    sample_observation_ensemble,
    simulate_truth,
)
from .filters import (
    EnKFConfig,
    FilterAborted,
    FilterRun,
    FilterState,
    OTPFConfig,
    SIRConfig,
    effective_sample_size,
    enkf_analysis,
    filter_step,
    init_state,
    kalman_gain,
    multinomial_resample,
    run_filter,
    sir_weights,
)
from .harness import (
    ExperimentSpec,
    SpecError,
    load_experiment_spec,
    report,
    run_experiment,
    sweep,
)
from .metrics import (
    MetricRow,
    MetricSeries,
    MmdConfig,
    median_bandwidth,
    mmd_squared,
    mode_balance,
    rbf_kernel,
    state_mse,
)
from .models import (
    BimodalPriorModel,
    DynamicPolynomialModel,
    Lorenz63Model,
    Lorenz96Model,
    StaticSquareModel,
    as_state_space,
    lorenz63_rhs,
    lorenz96_rhs,
    prior_ensemble,
    rk4_step,
)
from .nn import AdamState, DenseNet, Gradient, NetLayout, adam_step, backward, forward, init_network, read_params, write_params
from .oracle import (
    GridPosterior,
    GridSpec,
    LinearGaussianSpec,
    default_grid,
    exact_kalman_posterior,
    grid_bayes_update,
    grid_moments,
    grid_sample,
    reference_sir_posterior,
)
from .transport import (
    EnKFBlock,
    GapDiagnostic,
    GapSolverConfig,
    Potential,
    TrainBatch,
    TrainConfig,
    TransportMap,
    apply_map,
    empirical_objective,
    enkf_block_apply,
    estimate_optimality_gap,
    fit_conditional_map,
    make_potential,
    make_transport_map,
)

__all__ = [
    "__version__",
    "AdamState", "BimodalPriorModel", "DenseNet", "DynamicPolynomialModel",
    "EnKFBlock", "EnKFConfig", "Ensemble", "ExperimentSpec", "FilterAborted", "FilterRun",
    "FilterState", "GapDiagnostic", "GapSolverConfig", "Gradient",
    "GridPosterior", "GridSpec", "LinearGaussianSpec", "Lorenz63Model",
    "Lorenz96Model", "MetricRow", "MetricSeries", "MmdConfig", "NetLayout",
    "OTPFConfig", "Potential", "RandomSource", "SIRConfig", "SpecError",
    "StateSpaceModel", "StaticSquareModel", "TrainBatch", "TrainConfig",
    "Trajectory", "TransportMap",
    "adam_step", "apply_map", "as_state_space", "backward",
    "default_grid", "effective_sample_size", "empirical_objective",
    "enkf_analysis", "enkf_block_apply", "estimate_optimality_gap",
    "exact_kalman_posterior", "filter_step", "fit_conditional_map", "forward",
    "grid_bayes_update", "grid_moments", "grid_sample", "init_network",
    "init_state", "kalman_gain", "load_experiment_spec", "lorenz63_rhs",
    "lorenz96_rhs", "make_potential", "make_transport_map",
    "median_bandwidth", "mmd_squared", "mode_balance", "multinomial_resample",
    "prior_ensemble", "propagate_ensemble", "read_params",
    "reference_sir_posterior", "report", "rbf_kernel", "rk4_step",
    "run_experiment", "run_filter", "sample_observation_ensemble",
    "simulate_truth", "sir_weights", "state_mse", "sweep", "write_params",
]
