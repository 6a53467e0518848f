//! One optimization round: sample a swarm, score it, fit surrogates, solve.

use serde::{Deserialize, Serialize};

use crate::domain::{natural_distribution, repetition_caps, DomainSet, Mixture, RepetitionBudget};
use crate::error::{MixError, Result};
use crate::optimize::{solve, SolveOutcome, SolveSpec, SolverKind};
use crate::oracle::{Oracle, SwarmDataset};
use crate::regression::{aggregate_objective, FitConfig, FittedModelSet, GranularitySpec};
use crate::rng::{derive, streams};
use crate::swarm::{sample_with_caps, Sparsity, SwarmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub swarm_size: usize,
    pub concentration: f64,
    pub sparsity: Sparsity,
    /// Dirichlet prior; the natural distribution when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Mixture>,
    /// Repetition budget; caps both the swarm and the solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<RepetitionBudget>,
    pub lambda: f64,
    /// Solver; the model set's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverKind>,
    pub fit: FitConfig,
    pub granularity: GranularitySpec,
    pub seed: u64,
}

impl BaseConfig {
    pub fn new(swarm_size: usize, seed: u64) -> Self {
        Self {
            swarm_size,
            concentration: 1.0,
            sparsity: Sparsity::Dense,
            prior: None,
            budget: None,
            lambda: 0.0,
            solver: None,
            fit: FitConfig::with_seed(derive(seed, streams::FIT, 0)),
            granularity: GranularitySpec::per_task(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseOutcome {
    pub solve: SolveOutcome,
    pub swarm: SwarmDataset,
    pub models: FittedModelSet,
    pub warnings: Vec<String>,
}

fn caps_for(d: &DomainSet, cfg: &BaseConfig) -> Result<Option<Vec<f64>>> {
    match &cfg.budget {
        Some(b) => {
            let c = repetition_caps(d, b);
            if !c.feasible {
                return Err(MixError::InfeasibleCaps {
                    sum: c.caps.iter().sum(),
                });
            }
            Ok(Some(c.caps))
        }
        None => Ok(None),
    }
}

/// Full round over `d` with caps from `cfg.budget`.
pub fn run_base(d: &DomainSet, cfg: &BaseConfig, oracle: &dyn Oracle) -> Result<BaseOutcome> {
    let caps = caps_for(d, cfg)?;
    run_base_with(d, caps, &[], cfg, oracle)
}

/// Full round with explicit caps; `protected` coordinates skip sparse clipping.
pub fn run_base_with(
    d: &DomainSet,
    caps: Option<Vec<f64>>,
    protected: &[usize],
    cfg: &BaseConfig,
    oracle: &dyn Oracle,
) -> Result<BaseOutcome> {
    let swarm = sample_and_score(d, caps.as_deref(), protected, cfg, oracle)?;
    fit_and_solve(d, swarm, caps, cfg)
}

/// Tops up an existing pool with `cfg.swarm_size` fresh runs, then fits and solves.
pub fn run_base_pooled(d: &DomainSet, pool: SwarmDataset, cfg: &BaseConfig, oracle: &dyn Oracle) -> Result<BaseOutcome> {
    if pool.domains != d.ids() {
        return Err(MixError::Schema("pool is over a different domain list".into()));
    }
    let caps = caps_for(d, cfg)?;
    let mut swarm = pool;
    if cfg.swarm_size > 0 {
        swarm.extend(sample_and_score(d, caps.as_deref(), &[], cfg, oracle)?)?;
    }
    fit_and_solve(d, swarm, caps, cfg)
}

fn sample_and_score(
    d: &DomainSet,
    caps: Option<&[f64]>,
    protected: &[usize],
    cfg: &BaseConfig,
    oracle: &dyn Oracle,
) -> Result<SwarmDataset> {
    let prior = match &cfg.prior {
        Some(p) => p.clone(),
        None => natural_distribution(d)?,
    };
    let swarm_cfg = SwarmConfig {
        count: cfg.swarm_size,
        prior,
        concentration: cfg.concentration,
        sparsity: cfg.sparsity,
        constrained: None,
        seed: cfg.seed,
    };
    let mixes = sample_with_caps(&swarm_cfg, caps, protected)?;
    oracle.evaluate(&d.ids(), &mixes, derive(cfg.seed, streams::NOISE, 0))
}

/// Fits surrogates to `swarm` and solves with the natural distribution as KL anchor.
pub fn fit_and_solve(d: &DomainSet, swarm: SwarmDataset, caps: Option<Vec<f64>>, cfg: &BaseConfig) -> Result<BaseOutcome> {
    if swarm.domains != d.ids() {
        return Err(MixError::Schema("swarm is over a different domain list".into()));
    }
    let models = FittedModelSet::fit(&swarm, &cfg.granularity, &cfg.fit)?;
    let mut warnings = models.warnings();
    let solver = match cfg.solver {
        Some(s) => {
            if matches!(s, SolverKind::Exact { .. }) && !models.is_convex() {
                warnings.push("exact solver on a nonconvex surrogate finds a stationary point only".into());
            }
            s
        }
        None => models.default_solver(derive(cfg.seed, streams::SEARCH, 0)),
    };
    let spec = SolveSpec::new(cfg.lambda, natural_distribution(d)?, caps, solver);
    let obj = aggregate_objective(&models)?;
    let solve = solve(&obj, &spec)?;
    if !solve.diagnostics.converged && matches!(solver, SolverKind::Exact { .. }) {
        warnings.push(format!(
            "solver stopped before convergence (projected gradient {:.2e})",
            solve.diagnostics.projected_gradient_norm
        ));
    }
    Ok(BaseOutcome {
        solve,
        swarm,
        models,
        warnings,
    })
}
