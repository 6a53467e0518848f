//! Per-task surrogate models fitted on swarm data, at three granularities.

mod gp;
pub mod lm;
mod loglinear;
mod powerlaw;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gp::{GpGrid, GpModel};
pub use loglinear::LogLinearObjective;
pub use powerlaw::BIMIX_FLOOR;

use crate::error::{MixError, Result};
use crate::optimize::Objective;
use crate::oracle::SwarmDataset;

/// Model parameters, tagged by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    LogLinear { c: f64, a: Vec<f64> },
    BiMix { a: Vec<f64>, alpha: Vec<f64> },
    AutoScale { c: f64, a: Vec<f64>, alpha: Vec<f64>, r: f64 },
    GaussianProcess(GpModel),
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::LogLinear { .. } => "log_linear",
            ModelFamily::BiMix { .. } => "bi_mix",
            ModelFamily::AutoScale { .. } => "auto_scale",
            ModelFamily::GaussianProcess(_) => "gaussian_process",
        }
    }

    pub fn predict(&self, p: &[f64]) -> f64 {
        match self {
            ModelFamily::LogLinear { c, a } => c + a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>().exp(),
            ModelFamily::BiMix { a, alpha } => powerlaw::bimix_value(a, alpha, p),
            ModelFamily::AutoScale { c, a, alpha, r } => powerlaw::autoscale_value(*c, a, alpha, *r, p),
            ModelFamily::GaussianProcess(g) => g.predict(p),
        }
    }

    pub fn gradient(&self, p: &[f64], out: &mut [f64]) {
        match self {
            ModelFamily::LogLinear { a, .. } => {
                let e = a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>().exp();
                for (g, x) in out.iter_mut().zip(a) {
                    *g = e * x;
                }
            }
            ModelFamily::BiMix { a, alpha } => powerlaw::bimix_gradient(a, alpha, p, out),
            ModelFamily::AutoScale { a, alpha, r, .. } => powerlaw::autoscale_gradient(a, alpha, *r, p, out),
            ModelFamily::GaussianProcess(g) => g.gradient(p, out),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelFamily::LogLinear { a, .. } | ModelFamily::BiMix { a, .. } | ModelFamily::AutoScale { a, .. } => {
                a.len()
            }
            ModelFamily::GaussianProcess(g) => g.train_x.first().map_or(0, Vec::len),
        }
    }

    /// Whether the mean over such models is convex, so the exact solver applies.
    pub fn is_convex(&self) -> bool {
        !matches!(self, ModelFamily::GaussianProcess(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Euclidean norm of the training residuals.
    pub residual_norm: f64,
    pub rmse: f64,
    pub restarts: usize,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FitDiagnostics {
    fn from_cost(cost: f64, n: usize, restarts: usize, converged: bool, iterations: usize) -> Self {
        let ss = 2.0 * cost;
        let mut warnings = vec![];
        if !converged {
            warnings.push("no restart met a stopping criterion before the iteration cap".into());
        }
        Self {
            residual_norm: ss.sqrt(),
            rmse: (ss / n as f64).sqrt(),
            restarts,
            converged,
            iterations,
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTaskModel {
    /// Task id, family name, or the aggregate unit id.
    pub task: String,
    pub granularity: String,
    pub model: ModelFamily,
    pub diagnostics: FitDiagnostics,
}

impl FittedTaskModel {
    pub fn predict(&self, p: &[f64]) -> f64 {
        self.model.predict(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    LogLinear,
    BiMix,
    AutoScale { r: f64 },
    GaussianProcess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub family: FamilyKind,
    pub restarts: usize,
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub seed: u64,
    #[serde(default)]
    pub gp_grid: GpGrid,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            family: FamilyKind::LogLinear,
            restarts: 8,
            max_iters: 500,
            gradient_tol: 1e-10,
            seed: 0,
            gp_grid: GpGrid::default(),
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn lm(&self) -> lm::LmOptions {
        lm::LmOptions {
            max_iters: self.max_iters,
            gradient_tol: self.gradient_tol,
        }
    }
}

fn check_records(records: usize, required: usize) -> Result<()> {
    if records < required {
        return Err(MixError::Underdetermined { records, required });
    }
    Ok(())
}

fn task_column(data: &SwarmDataset, task: &str) -> Result<Vec<f64>> {
    let i = data
        .task_index(task)
        .ok_or_else(|| MixError::MissingModel(task.to_string()))?;
    Ok(data.column(i))
}

fn xs_of(data: &SwarmDataset) -> Vec<Vec<f64>> {
    data.records.iter().map(|r| r.mixture.clone()).collect()
}

/// Fits one unit (a task or a task average) with the configured family.
pub fn fit_unit(xs: &[Vec<f64>], ys: &[f64], unit: &str, granularity: &str, cfg: &FitConfig) -> Result<FittedTaskModel> {
    if xs.is_empty() {
        return Err(MixError::Underdetermined { records: 0, required: 1 });
    }
    let (model, diagnostics) = match cfg.family {
        FamilyKind::LogLinear => {
            let (c, a, d) = loglinear::fit(xs, ys, cfg)?;
            (ModelFamily::LogLinear { c, a }, d)
        }
        FamilyKind::BiMix => {
            let (a, alpha, d) = powerlaw::fit_bimix(xs, ys, cfg)?;
            (ModelFamily::BiMix { a, alpha }, d)
        }
        FamilyKind::AutoScale { r } => {
            let (c, a, alpha, d) = powerlaw::fit_autoscale(xs, ys, r, cfg)?;
            (ModelFamily::AutoScale { c, a, alpha, r }, d)
        }
        FamilyKind::GaussianProcess => {
            let g = gp::fit(xs, ys, &cfg.gp_grid)?;
            let ss: f64 = xs.iter().zip(ys).map(|(x, y)| (g.predict(x) - y).powi(2)).sum();
            let d = FitDiagnostics {
                residual_norm: ss.sqrt(),
                rmse: (ss / ys.len() as f64).sqrt(),
                restarts: 1,
                converged: true,
                iterations: cfg.gp_grid.lengthscales.len()
                    * cfg.gp_grid.signal_variances.len()
                    * cfg.gp_grid.noise_variances.len(),
                warnings: vec![],
            };
            (ModelFamily::GaussianProcess(g), d)
        }
    };
    Ok(FittedTaskModel {
        task: unit.to_string(),
        granularity: granularity.to_string(),
        model,
        diagnostics,
    })
}

pub fn fit_log_linear(data: &SwarmDataset, task: &str, restarts: usize, seed: u64) -> Result<FittedTaskModel> {
    let cfg = FitConfig {
        restarts,
        seed,
        ..FitConfig::default()
    };
    fit_unit(&xs_of(data), &task_column(data, task)?, task, "per_task", &cfg)
}

pub fn fit_bimix(data: &SwarmDataset, task: &str, restarts: usize, seed: u64) -> Result<FittedTaskModel> {
    let cfg = FitConfig {
        family: FamilyKind::BiMix,
        restarts,
        seed,
        ..FitConfig::default()
    };
    fit_unit(&xs_of(data), &task_column(data, task)?, task, "per_task", &cfg)
}

pub fn fit_autoscale(data: &SwarmDataset, task: &str, r: f64, restarts: usize, seed: u64) -> Result<FittedTaskModel> {
    let cfg = FitConfig {
        family: FamilyKind::AutoScale { r },
        restarts,
        seed,
        ..FitConfig::default()
    };
    fit_unit(&xs_of(data), &task_column(data, task)?, task, "per_task", &cfg)
}

pub fn fit_gp(data: &SwarmDataset, task: &str, grid: &GpGrid) -> Result<FittedTaskModel> {
    let cfg = FitConfig {
        family: FamilyKind::GaussianProcess,
        gp_grid: grid.clone(),
        ..FitConfig::default()
    };
    fit_unit(&xs_of(data), &task_column(data, task)?, task, "per_task", &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Granularity {
    PerTask,
    /// Task id to family name.
    PerFamily { families: BTreeMap<String, String> },
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub mode: Granularity,
}

impl GranularitySpec {
    pub fn per_task() -> Self {
        Self { mode: Granularity::PerTask }
    }

    pub fn aggregated() -> Self {
        Self {
            mode: Granularity::Aggregated,
        }
    }

    pub fn per_family(families: BTreeMap<String, String>) -> Self {
        Self {
            mode: Granularity::PerFamily { families },
        }
    }

    pub fn tag(&self) -> &'static str {
        match self.mode {
            Granularity::PerTask => "per_task",
            Granularity::PerFamily { .. } => "per_family",
            Granularity::Aggregated => "aggregated",
        }
    }

    /// Groups `tasks` into fitting units `(unit id, member task indices)`.
    pub fn units(&self, tasks: &[String]) -> Result<Vec<(String, Vec<usize>)>> {
        match &self.mode {
            Granularity::PerTask => Ok(tasks.iter().enumerate().map(|(i, t)| (t.clone(), vec![i])).collect()),
            Granularity::Aggregated => Ok(vec![("all".into(), (0..tasks.len()).collect())]),
            Granularity::PerFamily { families } => {
                let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for (i, t) in tasks.iter().enumerate() {
                    let f = families
                        .get(t)
                        .ok_or_else(|| MixError::InvalidConfig(format!("task '{t}' has no family")))?;
                    groups.entry(f.clone()).or_default().push(i);
                }
                Ok(groups.into_iter().collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedUnit {
    pub id: String,
    pub tasks: Vec<String>,
    /// Weight in the aggregate objective: `|unit| / n`.
    pub weight: f64,
    pub model: FittedTaskModel,
}

/// All fitted units over one domain list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModelSet {
    pub domains: Vec<String>,
    pub tasks: Vec<String>,
    pub granularity: GranularitySpec,
    pub units: Vec<FittedUnit>,
}

impl FittedModelSet {
    pub fn fit(data: &SwarmDataset, granularity: &GranularitySpec, cfg: &FitConfig) -> Result<Self> {
        let units = granularity.units(&data.tasks)?;
        let n = data.tasks.len() as f64;
        let xs = xs_of(data);
        let fitted = units
            .par_iter()
            .map(|(id, members)| {
                let ys: Vec<f64> = data
                    .records
                    .iter()
                    .map(|r| members.iter().map(|&i| r.scores[i]).sum::<f64>() / members.len() as f64)
                    .collect();
                let model = fit_unit(&xs, &ys, id, granularity.tag(), cfg)?;
                Ok(FittedUnit {
                    id: id.clone(),
                    tasks: members.iter().map(|&i| data.tasks[i].clone()).collect(),
                    weight: members.len() as f64 / n,
                    model,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domains: data.domains.clone(),
            tasks: data.tasks.clone(),
            granularity: granularity.clone(),
            units: fitted,
        })
    }

    /// The unit model that predicts `task`.
    pub fn model_for(&self, task: &str) -> Option<&FittedTaskModel> {
        self.units
            .iter()
            .find(|u| u.tasks.iter().any(|t| t == task))
            .map(|u| &u.model)
    }

    pub fn is_convex(&self) -> bool {
        self.units.iter().all(|u| u.model.model.is_convex())
    }

    /// Default solver per family: search for GP and BiMix surrogates, exact otherwise.
    pub fn default_solver(&self, search_seed: u64) -> crate::optimize::SolverKind {
        let search = self
            .units
            .iter()
            .any(|u| matches!(u.model.model, ModelFamily::GaussianProcess(_) | ModelFamily::BiMix { .. }));
        if search {
            crate::optimize::SolverKind::search(search_seed)
        } else {
            crate::optimize::SolverKind::exact()
        }
    }

    /// Log-linear parameters per unit, when every unit is log-linear.
    pub fn log_linear(&self) -> Option<LogLinearObjective> {
        let mut offsets = vec![];
        let mut slopes = vec![];
        let mut weights = vec![];
        for u in &self.units {
            match &u.model.model {
                ModelFamily::LogLinear { c, a } => {
                    offsets.push(*c);
                    slopes.push(a.clone());
                    weights.push(u.weight);
                }
                _ => return None,
            }
        }
        Some(LogLinearObjective {
            offsets,
            slopes,
            weights,
        })
    }

    pub fn warnings(&self) -> Vec<String> {
        self.units
            .iter()
            .flat_map(|u| u.model.diagnostics.warnings.iter().map(move |w| format!("{}: {w}", u.id)))
            .collect()
    }
}

/// Weighted sum of unit models; value and analytic gradient.
pub struct AggregateObjective<'a> {
    set: &'a FittedModelSet,
}

impl Objective for AggregateObjective<'_> {
    fn dim(&self) -> usize {
        self.set.domains.len()
    }

    fn value(&self, p: &[f64]) -> f64 {
        self.set.units.iter().map(|u| u.weight * u.model.predict(p)).sum()
    }

    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        let mut buf = vec![0.0; out.len()];
        for u in &self.set.units {
            u.model.model.gradient(p, &mut buf);
            for (g, b) in out.iter_mut().zip(&buf) {
                *g += u.weight * b;
            }
        }
    }
}

/// Checks that every task is covered and returns the aggregate objective.
pub fn aggregate_objective(set: &FittedModelSet) -> Result<AggregateObjective<'_>> {
    for t in &set.tasks {
        if set.model_for(t).is_none() {
            return Err(MixError::MissingModel(t.clone()));
        }
    }
    let m = set.domains.len();
    for u in &set.units {
        if u.model.model.dim() != m {
            return Err(MixError::DimensionMismatch {
                expected: m,
                got: u.model.model.dim(),
            });
        }
    }
    Ok(AggregateObjective { set })
}

/// Pearson correlation pooled over every (task, holdout record) pair.
pub fn regression_fit_score(set: &FittedModelSet, holdout: &SwarmDataset) -> Result<f64> {
    if holdout.is_empty() {
        return Err(MixError::Schema("empty holdout".into()));
    }
    if holdout.domains != set.domains {
        return Err(MixError::Schema("holdout is over a different domain list".into()));
    }
    let mut pred = vec![];
    let mut truth = vec![];
    for (i, t) in holdout.tasks.iter().enumerate() {
        let model = set.model_for(t).ok_or_else(|| MixError::MissingModel(t.clone()))?;
        for r in &holdout.records {
            pred.push(model.predict(&r.mixture));
            truth.push(r.scores[i]);
        }
    }
    pearson(&pred, &truth)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MixError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 {
        return Err(MixError::ZeroVariance("predictions"));
    }
    if syy <= 0.0 {
        return Err(MixError::ZeroVariance("observations"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
