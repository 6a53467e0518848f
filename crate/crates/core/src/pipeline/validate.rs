//! Monte-Carlo audits of the explicit reuse bounds on random noiseless truths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{theorem1_constant, theorem2_bound, weak_mix, AUDIT_TOL};
use crate::domain::{apply_update, Domain, DomainSet, DomainUpdate, Mixture, RepetitionBudget};
use crate::error::Result;
use crate::oracle::GroundTruthModel;
use crate::reuse::ReusePlan;
use crate::rng::{derive, streams, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateConfig {
    pub instances: usize,
    pub fixed_domains: usize,
    pub added_domains: usize,
    pub tasks: usize,
    /// Each instance is audited once per entry; `None` means no repetition caps.
    pub budgets: Vec<Option<RepetitionBudget>>,
    pub seed: u64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            fixed_domains: 4,
            added_domains: 2,
            tasks: 8,
            budgets: vec![None],
            seed: 0,
        }
    }
}

/// One reused candidate audited against the performance-gap bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAuditRow {
    pub instance: usize,
    pub seed: u64,
    pub budget: usize,
    /// `reused` (pre-update optimum), `weak`, `intermediate` or `optimal`.
    pub candidate: String,
    pub reuse_gap: f64,
    pub performance_gap: f64,
    pub bound: f64,
    pub constant: f64,
    pub mu: f64,
    pub kappa: f64,
    pub rho_star: f64,
    pub holds: bool,
    pub mutual_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddAuditRow {
    pub instance: usize,
    pub seed: u64,
    pub budget: usize,
    pub reuse_gap: f64,
    pub bound: f64,
    pub mu1: f64,
    pub kappa: f64,
    pub one_minus_rho: f64,
    pub holds: bool,
    pub mutual_feasible: bool,
    /// weak >= intermediate >= optimal performance gap, to `AUDIT_TOL`.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub gap_audits: usize,
    pub gap_feasible: usize,
    pub gap_holds: usize,
    pub add_audits: usize,
    pub add_feasible: usize,
    pub add_holds: usize,
    pub monotone: usize,
    /// Mean `1 - rho*` per budget entry.
    pub mean_one_minus_rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub gap_rows: Vec<GapAuditRow>,
    pub add_rows: Vec<AddAuditRow>,
    pub summary: ValidationSummary,
}

/// Strength of each task's preferred domain in audit truths.
const SPECIALIST: f64 = 2.0;
const SLOPE_SD: f64 = 0.3;

/// A random Add instance: `f*` domains (1e3 to 1e5 tokens) grow by `n*`
/// domains (10 to 100 tokens), under a specialist truth.
pub fn audit_instance(cfg: &ValidateConfig, seed: u64) -> Result<(DomainSet, DomainUpdate, GroundTruthModel)> {
    use rand::Rng;
    let mut rng = substream(seed, streams::TRUTH, 1);
    // added domains are small next to the existing ones
    let fixed: Vec<Domain> = (0..cfg.fixed_domains)
        .map(|j| Domain::new(format!("f{j}"), rng.random_range(1_000u64..100_000)))
        .collect();
    let added: Vec<Domain> = (0..cfg.added_domains)
        .map(|j| Domain::new(format!("n{j}"), rng.random_range(10u64..100)))
        .collect();
    let pre = DomainSet::new(fixed)?;
    let update = DomainUpdate::add(added);
    let post = apply_update(&pre, &update)?.domains;
    let truth = GroundTruthModel::specialist(cfg.tasks, &post.ids(), SPECIALIST, SLOPE_SD, 0.0, seed)?;
    Ok((pre, update, truth))
}

fn audit_one(cfg: &ValidateConfig, i: usize) -> Result<(Vec<GapAuditRow>, Vec<AddAuditRow>)> {
    let seed = derive(cfg.seed, streams::STUDY, i as u64);
    let (pre, update, truth) = audit_instance(cfg, seed)?;
    let post = apply_update(&pre, &update)?.domains;
    let fix = pre.ids();
    let mut gap_rows = vec![];
    let mut add_rows = vec![];
    for (bi, budget) in cfg.budgets.iter().enumerate() {
        let b = budget.as_ref();
        let t2 = theorem2_bound(&truth, &pre, &update, b, None, seed)?;
        let full = crate::oracle::truth_optimum(
            &truth.on(&post)?,
            b.map(|b| crate::domain::repetition_caps(&post, b).caps),
            0.0,
            &Mixture::uniform(post.len()),
        )?
        .mixture;
        let fw: Vec<f64> = fix.iter().map(|id| full.weights()[post.index_of(id).expect("present")]).collect();
        let optimal = Mixture::new(fw)?;
        let pre_caps = b.map(|b| crate::domain::repetition_caps(&pre, b).caps);
        let weak = weak_mix(&truth, &fix, pre_caps)?;
        let inter = Mixture::new(weak.weights().iter().zip(optimal.weights()).map(|(a, b)| 0.5 * (a + b)).collect())?;
        let mut gaps = vec![];
        for (name, ratios) in [("reused", &t2.reused), ("weak", &weak), ("intermediate", &inter), ("optimal", &optimal)] {
            let plan = ReusePlan::new(post.clone(), fix.clone(), ratios.clone())?;
            let r = theorem1_constant(&truth, &plan, b, None, seed)?;
            gaps.push(r.performance_gap);
            gap_rows.push(GapAuditRow {
                instance: i,
                seed,
                budget: bi,
                candidate: name.into(),
                reuse_gap: r.reuse_gap,
                performance_gap: r.performance_gap,
                bound: r.bound,
                constant: r.constant,
                mu: r.mu,
                kappa: r.kappa,
                rho_star: r.rho_star,
                holds: r.holds,
                mutual_feasible: r.mutual_feasible,
            });
        }
        add_rows.push(AddAuditRow {
            instance: i,
            seed,
            budget: bi,
            reuse_gap: t2.reuse_gap,
            bound: t2.bound,
            mu1: t2.mu1,
            kappa: t2.kappa,
            one_minus_rho: t2.one_minus_rho,
            holds: t2.holds,
            mutual_feasible: t2.mutual_feasible,
            monotone: gaps[1] + AUDIT_TOL >= gaps[2] && gaps[2] + AUDIT_TOL >= gaps[3],
        });
    }
    Ok((gap_rows, add_rows))
}

/// Audits `cfg.instances` random Add instances across the budget grid.
pub fn validate_theorems(cfg: &ValidateConfig) -> Result<ValidationReport> {
    let parts = (0..cfg.instances)
        .into_par_iter()
        .map(|i| audit_one(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let (gap_rows, add_rows): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let gap_rows: Vec<GapAuditRow> = gap_rows.into_iter().flatten().collect();
    let add_rows: Vec<AddAuditRow> = add_rows.into_iter().flatten().collect();
    let mean_one_minus_rho = (0..cfg.budgets.len())
        .map(|b| {
            let xs: Vec<f64> = add_rows.iter().filter(|r| r.budget == b).map(|r| r.one_minus_rho).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        })
        .collect();
    let summary = ValidationSummary {
        gap_audits: gap_rows.len(),
        gap_feasible: gap_rows.iter().filter(|r| r.mutual_feasible).count(),
        gap_holds: gap_rows.iter().filter(|r| r.mutual_feasible && r.holds).count(),
        add_audits: add_rows.len(),
        add_feasible: add_rows.iter().filter(|r| r.mutual_feasible).count(),
        add_holds: add_rows.iter().filter(|r| r.mutual_feasible && r.holds).count(),
        monotone: add_rows.iter().filter(|r| r.monotone).count(),
        mean_one_minus_rho,
    };
    Ok(ValidationReport {
        gap_rows,
        add_rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_audit_holds() {
        let cfg = ValidateConfig {
            instances: 4,
            ..ValidateConfig::default()
        };
        let rep = validate_theorems(&cfg).unwrap();
        assert_eq!(rep.summary.gap_audits, 16);
        assert_eq!(rep.summary.gap_holds, rep.summary.gap_feasible);
        assert_eq!(rep.summary.add_holds, rep.summary.add_feasible);
    }
}
