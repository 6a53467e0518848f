//! How the gap to the best mixture shrinks as the swarm grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{natural_distribution, Domain, DomainSet};
use crate::error::Result;
use crate::oracle::{truth_optimum, GroundTruthModel};
use crate::swarm::recommended_swarm_size;

use super::base::{run_base, BaseConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub domains: usize,
    pub tasks: usize,
    pub noise_sd: f64,
    pub multipliers: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub seed: u64,
    pub multiplier: usize,
    pub swarm_size: usize,
    /// Noiseless loss of the proposal minus that of the truth optimum.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// Median gap per entry of `multipliers`.
    pub medians: Vec<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// For each seed draws one specialist truth over equal-sized domains, then runs a base
/// round at `K = c (m + 1)` for each multiplier. Swarms and noise come from the
/// same per-index streams, so a larger swarm extends the smaller one.
pub fn sample_complexity_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let d = DomainSet::new((0..cfg.domains).map(|j| Domain::new(format!("d{j:02}"), 1_000)).collect())?;
    let rows = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let truth = GroundTruthModel::specialist(cfg.tasks, &d.ids(), 2.0, 0.3, cfg.noise_sd, seed)?;
            let clean = truth.noiseless();
            let best = truth_optimum(&clean, None, 0.0, &natural_distribution(&d)?)?.surrogate_value;
            cfg.multipliers
                .iter()
                .map(|&c| {
                    let k = recommended_swarm_size(d.len(), c);
                    let out = run_base(&d, &BaseConfig::new(k, seed), &truth)?;
                    let got = crate::analysis::truth_loss(&clean, out.solve.mixture.weights());
                    Ok(StudyRow {
                        seed,
                        multiplier: c,
                        swarm_size: k,
                        gap: (got - best).max(0.0),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let medians = cfg
        .multipliers
        .iter()
        .map(|&c| median(rows.iter().filter(|r| r.multiplier == c).map(|r| r.gap).collect()))
        .collect();
    Ok(StudyReport { rows, medians })
}
