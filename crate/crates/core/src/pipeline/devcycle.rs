//! Replays a chain of domain updates under one reuse strategy and tallies the
//! proxy runs each stage costs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{apply_update, natural_distribution, repetition_caps, DomainSet, DomainUpdate, Mixture, NamedMixture, UpdateKind};
use crate::error::{MixError, Result};
use crate::oracle::{truth_optimum, GroundTruthModel, Oracle, SwarmDataset, SwarmRecord};
use crate::reuse::{
    filter_old_swarm, fresh_runs_needed, full_mix_reuse, map_old_swarm, partial_mix_reuse, renormalize_remove,
    swarm_reuse_pool, ReusePlan,
};
use crate::rng::{derive, streams};
use crate::swarm::scheduled_swarm_size;

use super::base::{run_base, BaseConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStage {
    pub label: String,
    pub update: DomainUpdate,
    /// Unaffected domains reused by partial reuse, one frozen group per entry.
    #[serde(default)]
    pub partial_groups: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevChain {
    pub initial: DomainSet,
    pub stages: Vec<ChainStage>,
}

impl DevChain {
    /// Domain sets before the first update and after each one.
    pub fn domain_sets(&self) -> Result<Vec<DomainSet>> {
        let mut out = vec![self.initial.clone()];
        for s in &self.stages {
            let next = apply_update(out.last().expect("nonempty"), &s.update)?.domains;
            out.push(next);
        }
        Ok(out)
    }

    /// Every domain that appears at any stage, with its first-seen token count.
    pub fn all_domain_ids(&self) -> Result<Vec<String>> {
        let ids: BTreeSet<String> = self.domain_sets()?.iter().flat_map(|d| d.ids()).collect();
        Ok(ids.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullRecompute,
    FullReuse,
    PartialReuse,
    SwarmReuse,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FullRecompute,
        Strategy::FullReuse,
        Strategy::PartialReuse,
        Strategy::SwarmReuse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullRecompute => "full_recompute",
            Strategy::FullReuse => "full_reuse",
            Strategy::PartialReuse => "partial_reuse",
            Strategy::SwarmReuse => "swarm_reuse",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.replace('-', "_"))
            .ok_or_else(|| MixError::InvalidConfig(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<UpdateKind>,
    pub domains: usize,
    /// Dimension of the problem actually optimized (0 when no solve is needed).
    pub dim: usize,
    pub runs: usize,
    pub cumulative_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reused_runs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<NamedMixture>,
    /// Noiseless mean task loss of the proposed mixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_value: Option<f64>,
    /// Noiseless mean task loss of the best feasible mixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_optimum: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevcycleReport {
    pub strategy: Strategy,
    pub multiplier: usize,
    pub stages: Vec<StageRecord>,
    pub total_runs: usize,
}

/// Optimization dimension of a stage under `strategy`, and whether reuse applies.
enum StagePlan {
    /// Optimize every domain from scratch.
    Recompute,
    /// Renormalize the previous mixture; no runs.
    Renormalize,
    /// Reuse these frozen groups; everything else is recomputed.
    Reuse(Vec<Vec<String>>),
    /// Reuse the previous swarm.
    Pool,
}

fn stage_plan(strategy: Strategy, stage: &ChainStage, unaffected: &[String]) -> StagePlan {
    match strategy {
        Strategy::FullRecompute => StagePlan::Recompute,
        Strategy::SwarmReuse => StagePlan::Pool,
        Strategy::FullReuse if stage.update.kind == UpdateKind::Remove => StagePlan::Renormalize,
        Strategy::FullReuse if unaffected.is_empty() => StagePlan::Recompute,
        Strategy::FullReuse => StagePlan::Reuse(vec![unaffected.to_vec()]),
        Strategy::PartialReuse => {
            let groups: Vec<Vec<String>> = stage.partial_groups.iter().filter(|g| !g.is_empty()).cloned().collect();
            if groups.is_empty() {
                StagePlan::Recompute
            } else {
                StagePlan::Reuse(groups)
            }
        }
    }
}

fn runs_for(dim: usize, c: usize) -> usize {
    if dim <= 1 {
        0
    } else {
        scheduled_swarm_size(dim, c)
    }
}

/// Maps or filters the previous pool onto the next domain set.
fn carry_pool(pool: &SwarmDataset, update: &DomainUpdate, next: &DomainSet, warnings: &mut Vec<String>) -> Result<SwarmDataset> {
    match update.kind {
        UpdateKind::Add | UpdateKind::Partition => map_old_swarm(pool, update, next),
        kind => {
            let kept = filter_old_swarm(pool, update, next)?;
            warnings.push(format!(
                "{kind}: old runs cannot be mapped; kept {} of {} that never touched the affected domains",
                kept.len(),
                pool.len()
            ));
            Ok(kept)
        }
    }
}

/// Run counts only, no fitting. Swarm runs are assumed dense, so a fresh run
/// touches every domain present when it was drawn.
pub fn count_runs(chain: &DevChain, strategy: Strategy, c: usize) -> Result<DevcycleReport> {
    let sets = chain.domain_sets()?;
    let m0 = sets[0].len();
    let runs0 = scheduled_swarm_size(m0, c);
    let mut stages = vec![StageRecord {
        label: "initial".into(),
        kind: None,
        domains: m0,
        dim: m0,
        runs: runs0,
        cumulative_runs: runs0,
        reused_runs: None,
        mixture: None,
        truth_value: None,
        truth_optimum: None,
        warnings: vec![],
    }];
    let placeholder = |d: &DomainSet, n: usize| SwarmDataset {
        domains: d.ids(),
        tasks: vec!["support".into()],
        records: (0..n)
            .map(|_| SwarmRecord {
                mixture: vec![1.0 / d.len() as f64; d.len()],
                scores: vec![0.0],
            })
            .collect(),
    };
    let mut pool = placeholder(&sets[0], runs0);
    let mut total = runs0;
    for (t, stage) in chain.stages.iter().enumerate() {
        let applied = apply_update(&sets[t], &stage.update)?;
        let next = &applied.domains;
        let mut warnings = vec![];
        let mut reused_runs = None;
        let (dim, runs) = match stage_plan(strategy, stage, &applied.unaffected) {
            StagePlan::Recompute => (next.len(), runs_for(next.len(), c)),
            StagePlan::Renormalize => (0, 0),
            StagePlan::Reuse(groups) => {
                let fixed: usize = groups.iter().map(Vec::len).sum();
                let dim = groups.len() + next.len() - fixed;
                (dim, runs_for(dim, c))
            }
            StagePlan::Pool => {
                let mut carried = carry_pool(&pool, &stage.update, next, &mut warnings)?;
                let target = scheduled_swarm_size(next.len(), c);
                let mixes: Vec<Vec<f64>> = carried.records.iter().map(|r| r.mixture.clone()).collect();
                let fresh = fresh_runs_needed(&mixes, next.len(), target);
                reused_runs = Some(carried.len());
                carried.records.extend(placeholder(next, fresh).records);
                pool = carried;
                (next.len(), fresh)
            }
        };
        total += runs;
        stages.push(StageRecord {
            label: stage.label.clone(),
            kind: Some(stage.update.kind),
            domains: next.len(),
            dim,
            runs,
            cumulative_runs: total,
            reused_runs,
            mixture: None,
            truth_value: None,
            truth_optimum: None,
            warnings,
        });
    }
    Ok(DevcycleReport {
        strategy,
        multiplier: c,
        stages,
        total_runs: total,
    })
}

/// Settings for a full simulated chain against a ground-truth model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevcycleConfig {
    pub multiplier: usize,
    /// Template for every round; its swarm size and seed are set per stage.
    pub base: BaseConfig,
    pub seed: u64,
}

fn mean_loss(g: &GroundTruthModel, d: &DomainSet, p: &Mixture) -> Result<f64> {
    let g = g.on(d)?.noiseless();
    let scores = crate::oracle::evaluate_truth(&g, p, 0)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Result of one update under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub domains: DomainSet,
    pub mixture: Mixture,
    pub dim: usize,
    pub runs: usize,
    pub reused_runs: Option<usize>,
    /// Swarm to carry into the next update; `None` keeps the previous one.
    pub pool: Option<SwarmDataset>,
    pub warnings: Vec<String>,
}

/// Applies `stage` to `prev_set` and proposes a mixture with `strategy`.
///
/// `prev` is the mixture in force before the update and `pool` the swarm that
/// produced it. `cfg` supplies everything but the swarm size, which follows
/// the `c` schedule for the stage's optimization dimension.
#[allow(clippy::too_many_arguments)]
pub fn apply_strategy(
    prev_set: &DomainSet,
    prev: &NamedMixture,
    pool: &SwarmDataset,
    stage: &ChainStage,
    strategy: Strategy,
    c: usize,
    cfg: &BaseConfig,
    oracle: &dyn Oracle,
) -> Result<StepOutcome> {
    let applied = apply_update(prev_set, &stage.update)?;
    let next = &applied.domains;
    let sized = |k: usize| BaseConfig {
        swarm_size: k,
        ..cfg.clone()
    };
    let recompute = |warnings: Vec<String>| -> Result<StepOutcome> {
        let out = run_base(next, &sized(runs_for(next.len(), c).max(1)), oracle)?;
        Ok(StepOutcome {
            domains: next.clone(),
            mixture: out.solve.mixture,
            dim: next.len(),
            runs: out.swarm.len(),
            reused_runs: None,
            warnings: warnings.into_iter().chain(out.warnings).collect(),
            pool: Some(out.swarm),
        })
    };
    match stage_plan(strategy, stage, &applied.unaffected) {
        StagePlan::Recompute => recompute(vec![]),
        StagePlan::Renormalize => {
            let (_, m) = renormalize_remove(prev_set, &prev.aligned_to(prev_set)?, &stage.update.affected)?;
            Ok(StepOutcome {
                domains: next.clone(),
                mixture: m,
                dim: 0,
                runs: 0,
                reused_runs: None,
                pool: None,
                warnings: vec![],
            })
        }
        StagePlan::Reuse(groups) => {
            let fixed: usize = groups.iter().map(Vec::len).sum();
            let b = sized(runs_for(groups.len() + next.len() - fixed, c));
            let out = if strategy == Strategy::PartialReuse {
                partial_mix_reuse(next, prev, &applied.unaffected, groups, &b, oracle)
            } else {
                ReusePlan::from_previous(next.clone(), prev, groups).and_then(|plan| full_mix_reuse(&plan, &b, oracle))
            };
            match out {
                Ok(r) => Ok(StepOutcome {
                    domains: next.clone(),
                    dim: r.collapsed_ids.len(),
                    runs: r.runs,
                    reused_runs: None,
                    pool: None,
                    warnings: r.base.map(|b| b.warnings).unwrap_or_default(),
                    mixture: r.mixture,
                }),
                Err(MixError::InvalidPlan(why)) => recompute(vec![format!("reuse not possible ({why}); recomputing")]),
                Err(e) => Err(e),
            }
        }
        StagePlan::Pool => {
            let mut warnings = vec![];
            let carried = carry_pool(pool, &stage.update, next, &mut warnings)?;
            let reused = carried.len();
            let target = scheduled_swarm_size(next.len(), c);
            let out = swarm_reuse_pool(carried, next, target, &sized(0), oracle)?;
            warnings.extend(out.base.warnings.iter().cloned());
            Ok(StepOutcome {
                domains: next.clone(),
                mixture: out.mixture,
                dim: next.len(),
                runs: out.fresh_runs,
                reused_runs: Some(reused),
                pool: Some(out.swarm),
                warnings,
            })
        }
    }
}

/// Runs the whole chain: real swarms scored by `truth`, fitted, solved, and
/// each stage's proposal scored against the noiseless truth.
pub fn simulate_devcycle(
    chain: &DevChain,
    strategy: Strategy,
    cfg: &DevcycleConfig,
    truth: &GroundTruthModel,
) -> Result<DevcycleReport> {
    let c = cfg.multiplier;
    let sets = chain.domain_sets()?;
    let stage_cfg = |t: usize, swarm_size: usize| {
        let seed = derive(cfg.seed, streams::STUDY, t as u64);
        let mut b = cfg.base.clone();
        b.swarm_size = swarm_size;
        b.seed = seed;
        b.fit.seed = derive(seed, streams::FIT, 0);
        b
    };
    let score = |d: &DomainSet, p: &Mixture| -> Result<(f64, f64)> {
        let caps = match &cfg.base.budget {
            Some(b) => Some(repetition_caps(d, b).caps),
            None => None,
        };
        let best = truth_optimum(&truth.on(d)?.noiseless(), caps, cfg.base.lambda, &natural_distribution(d)?)?;
        Ok((mean_loss(truth, d, p)?, best.surrogate_value))
    };

    let d0 = &sets[0];
    let first = run_base(d0, &stage_cfg(0, scheduled_swarm_size(d0.len(), c)), truth)?;
    let (v, o) = score(d0, &first.solve.mixture)?;
    let mut prev = NamedMixture::new(d0, &first.solve.mixture);
    let mut pool = first.swarm.clone();
    let mut total = first.swarm.len();
    let mut stages = vec![StageRecord {
        label: "initial".into(),
        kind: None,
        domains: d0.len(),
        dim: d0.len(),
        runs: total,
        cumulative_runs: total,
        reused_runs: None,
        mixture: Some(prev.clone()),
        truth_value: Some(v),
        truth_optimum: Some(o),
        warnings: first.warnings,
    }];

    for (t, stage) in chain.stages.iter().enumerate() {
        let next = &sets[t + 1];
        let step = apply_strategy(&sets[t], &prev, &pool, stage, strategy, c, &stage_cfg(t + 1, 0), truth)?;
        if let Some(p) = step.pool {
            pool = p;
        }
        let (mix, dim, runs, reused_runs, warnings) = (step.mixture, step.dim, step.runs, step.reused_runs, step.warnings);
        let (v, o) = score(next, &mix)?;
        prev = NamedMixture::new(next, &mix);
        total += runs;
        stages.push(StageRecord {
            label: stage.label.clone(),
            kind: Some(stage.update.kind),
            domains: next.len(),
            dim,
            runs,
            cumulative_runs: total,
            reused_runs,
            mixture: Some(prev.clone()),
            truth_value: Some(v),
            truth_optimum: Some(o),
            warnings,
        });
    }
    Ok(DevcycleReport {
        strategy,
        multiplier: c,
        stages,
        total_runs: total,
    })
}
