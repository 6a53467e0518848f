//! Offline data-mixture optimization: swarm sampling, surrogate regression,
//! constrained solving, and mixture reuse when the domain set evolves.

pub mod analysis;
pub mod domain;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod optimize;
pub mod oracle;
pub mod pipeline;
pub mod regression;
pub mod reuse;
pub mod rng;
pub mod swarm;

pub use domain::{
    apply_update, natural_distribution, repetition_caps, AppliedUpdate, Domain, DomainSet,
    DomainUpdate, Mixture, NamedMixture, RepetitionBudget, RepetitionCaps, UpdateKind,
};
pub use error::{MixError, Result};
pub use optimize::{
    project_capped_simplex, solve_exact, solve_search, Objective, SolveOutcome, SolveSpec,
    SolverKind,
};
pub use oracle::{evaluate_truth, ingest_results, truth_optimum, GroundTruthModel, SwarmDataset};
pub use regression::{
    aggregate_objective, fit_autoscale, fit_bimix, fit_gp, fit_log_linear, regression_fit_score,
    FitConfig, FittedModelSet, FittedTaskModel, Granularity, GranularitySpec, ModelFamily,
};
pub use reuse::{
    collapse, collapsed_caps, expand, full_mix_reuse, partial_mix_reuse, renormalize_remove, swarm_reuse,
    CollapsedMixture, FixGroup, ReusePlan,
};
pub use analysis::{
    coupling_kappa, gap_report, max_abs_deviation, rank_correlation, rank_recompute_candidates, theorem1_constant,
    theorem2_bound, tv_distance, CouplingReport, GapReport,
};
pub use pipeline::devcycle::{apply_strategy, count_runs, simulate_devcycle, ChainStage, DevChain, StepOutcome, Strategy};
pub use swarm::{recommended_swarm_size, sample_swarm, scheduled_swarm_size, Sparsity, SwarmConfig};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
