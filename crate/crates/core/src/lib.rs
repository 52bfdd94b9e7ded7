//! Control variates for Metropolis-Hastings ergodic averages built from the
//! Poisson equation of a finite coarse chain.
//!
//! The pipeline: partition the state space into an [`Allotment`], estimate
//! the transition matrix of the chain between representatives
//! ([`estimate_transition_matrix`]), solve its Poisson equation
//! ([`solve_poisson`]), and use the piecewise-constant lift
//! ([`ControlVariate`]) to correct the plain ergodic average
//! ([`run_cv_estimator`]).

pub mod allotment;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod mh;
pub mod model;
pub mod rng;
pub mod scheme;

pub use allotment::{
    build_1d, build_boxes, build_exhaustive_sequence, mesh_and_radius, Allotment, ExhaustiveOptions, MeshReport,
};
pub use error::{Error, Result};
pub use estimator::{
    collect_runs, cv_estimate_step, ergodic_average, improvement_ratio, rate_diagnostic, run_cv_estimator,
    run_cv_estimator_with_streams, summarize, EstimatorRun, ImprovementSummary, RateDiagnostic,
};
pub use experiment::{run_diagnostics, run_experiment, ExperimentConfig};
pub use mh::{mh_step, simulate_path, simulate_stationary_path, ChainPath, MetropolisChain};
pub use model::{
    acceptance, DriftFunction, ForceFunction, MixtureComponent, Proposal, RandomWalk, TargetModel, WeightFunction,
};
pub use scheme::{
    build_control_variate, estimate_kernel_row, estimate_transition_matrix, solve_poisson, solve_poisson_pinned,
    stationary_distribution, CoarseChain, ControlVariate, PoissonSolution,
};
