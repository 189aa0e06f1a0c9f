"""Adaptive gating for single-photon time-of-flight depth sensing.

A SPAD pixel in synchronous time-correlated mode detects at most one
photon per laser cycle, and at high photon rates the first-arrival bias
(pile-up) makes naive histograms useless.  This package models that
acquisition process exactly, simulates it, and implements gating
policies, chief among them a Thompson-sampling scheme that gates where
the current depth posterior says the surface probably is, plus the
estimators (bias-corrected histograms, Bayesian depth posteriors) and an
experiment harness for comparing policies under matched time budgets.
"""

from .core import (
    AcquisitionRecord,
    DetectedHistogram,
    SceneTransient,
    SpadConfig,
    bin_to_depth,
    depth_to_bin,
    derive_num_bins,
    detection_distribution,
    detection_likelihood,
    folded_detection_distribution,
    no_detection_probability,
    pileup_distribution,
    sequence_log_likelihood,
    timestamps_to_histogram,
)
from .estimators import (
    BackgroundEstimate,
    DepthPosterior,
    TransientEstimate,
    coates_depth,
    coates_transient,
    default_flux_grid,
    dither_depth,
    estimate_background,
    log1mexp,
    logsumexp,
    map_depth,
    posterior_entropy,
    posterior_from_record,
    posterior_init,
    posterior_update,
)
from .harness import (
    AggregateRow,
    ConfigError,
    ExperimentConfig,
    PolicySpec,
    ResultRow,
    RowSpec,
    aggregate_rows,
    build_sweep_specs,
    compute_metrics,
    load_results_csv,
    normalization_check,
    parse_config,
    proposition_check,
    reward_consistency_check,
    run_pixel_experiment,
    run_scene_scan,
    run_sweep,
    serialize_config,
    write_aggregates_csv,
    write_map_csv,
    write_results_csv,
)
from .policies import (
    AdaptiveGatePolicy,
    ExposureControl,
    FixedGatePolicy,
    FreeRunningPolicy,
    UniformGatePolicy,
    optimal_gate,
    reward,
    termination_value,
)
from .scene import (
    SceneGrid,
    external_prior_mass,
    flatness_prior,
    load_depth_map,
    load_external_prior,
    load_flux_map,
    mismatch_transient,
    pixel_transient,
    prior_params_to_bins,
    scan_order,
)
from .spadsim import (
    FREE_RUN,
    CycleOutcome,
    arm_free_running,
    arm_triggered,
    run_acquisition,
    sample_cycle,
    stream_rng,
)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionRecord",
    "AdaptiveGatePolicy",
    "AggregateRow",
    "BackgroundEstimate",
    "ConfigError",
    "CycleOutcome",
    "DepthPosterior",
    "DetectedHistogram",
    "ExperimentConfig",
    "ExposureControl",
    "FREE_RUN",
    "FixedGatePolicy",
    "FreeRunningPolicy",
    "PolicySpec",
    "ResultRow",
    "RowSpec",
    "SceneGrid",
    "SceneTransient",
    "SpadConfig",
    "TransientEstimate",
    "UniformGatePolicy",
    "aggregate_rows",
    "arm_free_running",
    "arm_triggered",
    "bin_to_depth",
    "build_sweep_specs",
    "coates_depth",
    "coates_transient",
    "compute_metrics",
    "default_flux_grid",
    "depth_to_bin",
    "derive_num_bins",
    "detection_distribution",
    "detection_likelihood",
    "dither_depth",
    "estimate_background",
    "external_prior_mass",
    "flatness_prior",
    "folded_detection_distribution",
    "load_depth_map",
    "load_external_prior",
    "load_flux_map",
    "load_results_csv",
    "log1mexp",
    "logsumexp",
    "map_depth",
    "mismatch_transient",
    "no_detection_probability",
    "normalization_check",
    "optimal_gate",
    "parse_config",
    "pileup_distribution",
    "pixel_transient",
    "posterior_entropy",
    "posterior_from_record",
    "posterior_init",
    "posterior_update",
    "prior_params_to_bins",
    "proposition_check",
    "reward",
    "reward_consistency_check",
    "run_acquisition",
    "run_pixel_experiment",
    "run_scene_scan",
    "run_sweep",
    "sample_cycle",
    "scan_order",
    "sequence_log_likelihood",
    "serialize_config",
    "stream_rng",
    "termination_value",
    "timestamps_to_histogram",
    "write_aggregates_csv",
    "write_map_csv",
    "write_results_csv",
]
