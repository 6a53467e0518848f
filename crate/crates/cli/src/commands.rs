use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mixopt_core::analysis::{max_abs_deviation, RecomputeCandidate};
use mixopt_core::fixtures;
use mixopt_core::optimize::solve;
use mixopt_core::oracle::ingest_results_from;
use mixopt_core::pipeline::base::{fit_and_solve, run_base, BaseConfig, BaseOutcome};
use mixopt_core::pipeline::devcycle::{DevcycleConfig, DevcycleReport};
use mixopt_core::pipeline::validate::{validate_theorems, ValidateConfig};
use mixopt_core::regression::{FamilyKind, FitConfig};
use mixopt_core::rng::{derive, streams};
use mixopt_core::{
    aggregate_objective, apply_strategy, count_runs, coupling_kappa, natural_distribution, rank_recompute_candidates,
    regression_fit_score, repetition_caps, sample_swarm, scheduled_swarm_size, simulate_devcycle, tv_distance,
    ChainStage, DevChain, DomainSet, DomainUpdate, FittedModelSet, GranularitySpec, GroundTruthModel, Mixture,
    NamedMixture, RepetitionBudget, SolveSpec, SolverKind, Sparsity, Strategy, SwarmConfig, SwarmDataset,
};

use crate::manifest::{cell, Ctx};

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic log-linear ground-truth model.
    Truth(TruthArgs),
    /// Draw a swarm of mixtures, optionally scoring it with a synthetic truth.
    Sample(SampleArgs),
    /// Fit surrogate models to a results CSV.
    Fit(FitCmdArgs),
    /// Solve for the best mixture under fitted models.
    Optimize(OptimizeArgs),
    /// Sample, score, fit and solve over one domain set.
    Base(BaseArgs),
    /// Propose a mixture after one domain update, starting from a chain directory.
    Reuse(ReuseArgs),
    /// Replay a chain of domain updates under reuse strategies.
    Simulate(SimulateArgs),
    /// Audit the reuse bounds on seeded synthetic instances.
    Validate(ValidateArgs),
    /// Total variation distance between mixtures.
    Tv(TvArgs),
    /// Coupling term between reused and recomputed domains.
    Kappa(KappaArgs),
    /// Rerun a recorded command and compare its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BudgetArgs {
    /// Repetition factor k.
    #[arg(long, requires = "tokens")]
    pub k: Option<f64>,
    /// Requested training tokens R.
    #[arg(long, requires = "k")]
    pub tokens: Option<u64>,
}

impl BudgetArgs {
    fn budget(&self) -> Result<Option<RepetitionBudget>> {
        match (self.k, self.tokens) {
            (Some(k), Some(r)) => Ok(Some(RepetitionBudget::new(k, r)?)),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LogLinear,
    Bimix,
    Autoscale,
    Gp,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GranularityArg {
    PerTask,
    PerFamily,
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverArg {
    Exact,
    Search,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value_t = Family::LogLinear)]
    pub family: Family,
    /// Token scale R for the autoscale family.
    #[arg(long)]
    pub autoscale_r: Option<f64>,
    #[arg(long, value_enum, default_value_t = GranularityArg::PerTask)]
    pub granularity: GranularityArg,
    /// JSON object mapping task id to family name, for per-family fits.
    #[arg(long)]
    pub families: Option<PathBuf>,
    /// Random restarts per nonlinear fit.
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
}

impl FitArgs {
    fn config(&self, seed: u64) -> Result<FitConfig> {
        let family = match self.family {
            Family::LogLinear => FamilyKind::LogLinear,
            Family::Bimix => FamilyKind::BiMix,
            Family::Gp => FamilyKind::GaussianProcess,
            Family::Autoscale => FamilyKind::AutoScale {
                r: self.autoscale_r.ok_or_else(|| anyhow!("--family autoscale needs --autoscale-r"))?,
            },
        };
        Ok(FitConfig {
            family,
            restarts: self.restarts,
            ..FitConfig::with_seed(derive(seed, streams::FIT, 0))
        })
    }

    fn granularity(&self, ctx: &mut Ctx) -> Result<GranularitySpec> {
        Ok(match self.granularity {
            GranularityArg::PerTask => GranularitySpec::per_task(),
            GranularityArg::Aggregated => GranularitySpec::aggregated(),
            GranularityArg::PerFamily => {
                let path = self.families.as_ref().ok_or_else(|| anyhow!("--granularity per-family needs --families"))?;
                GranularitySpec::per_family(ctx.read_json::<BTreeMap<String, String>>(path)?)
            }
        })
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SwarmArgs {
    /// Dirichlet concentration; larger keeps draws closer to the prior.
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
    /// Clip weights below this threshold to zero before renormalizing.
    #[arg(long)]
    pub sparse: Option<f64>,
    /// Prior mixture (named JSON); the natural distribution when absent.
    #[arg(long)]
    pub prior: Option<PathBuf>,
}

impl SwarmArgs {
    fn sparsity(&self) -> Sparsity {
        match self.sparse {
            Some(threshold) => Sparsity::Sparse { threshold },
            None => Sparsity::Dense,
        }
    }

    fn prior(&self, ctx: &mut Ctx, d: &DomainSet) -> Result<Option<Mixture>> {
        match &self.prior {
            Some(p) => Ok(Some(ctx.read_json::<NamedMixture>(p)?.aligned_to(d)?)),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TruthArgs {
    /// Domain set JSON, or fixture:tokens / fixture:initial / fixture:final.
    #[arg(long)]
    pub domains: String,
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    /// Evaluation noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Give task i a strong negative slope on domain i mod m.
    #[arg(long)]
    pub specialist: Option<f64>,
    /// Slope spread around the specialist structure.
    #[arg(long, default_value_t = 0.3)]
    pub slope_sd: f64,
    #[arg(long, default_value = "truth.json")]
    pub out: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub domains: String,
    #[arg(long)]
    pub count: usize,
    #[command(flatten)]
    pub swarm: SwarmArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Swarm manifest file name inside --out-dir.
    #[arg(long, default_value = "swarm.json")]
    pub swarm_out: String,
    /// Score the swarm: synthetic:<truth.json>. Writes results.csv.
    #[arg(long)]
    pub oracle: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitCmdArgs {
    /// Results CSV with mix:<domain> and task:<task> columns.
    #[arg(long)]
    pub swarm: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Held-out results CSV for the fit score.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    /// Fitted model set JSON.
    #[arg(long)]
    pub models: PathBuf,
    /// Solve spec JSON (lambda, p0, caps, solver); lambda 0 with a uniform anchor when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value = "optimum.json")]
    pub out: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BaseArgs {
    #[arg(long)]
    pub domains: String,
    /// synthetic:<truth.json> or results:<csv>.
    #[arg(long)]
    pub oracle: String,
    /// Swarm size; the c=3 schedule when absent.
    #[arg(long)]
    pub swarm_size: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    #[command(flatten)]
    pub swarm: SwarmArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReuseArgs {
    /// Chain directory written by `base` or an earlier `reuse`.
    #[arg(long)]
    pub chain: PathBuf,
    /// Domain update JSON.
    #[arg(long)]
    pub update: PathBuf,
    /// full-recompute, full-reuse, partial-reuse:<id,id,...> or swarm-reuse.
    #[arg(long)]
    pub strategy: String,
    /// synthetic:<truth.json>.
    #[arg(long)]
    pub oracle: String,
    /// Swarm-size multiplier c.
    #[arg(long, default_value_t = 3)]
    pub multiplier: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub budget: BudgetArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Chain JSON, or fixture:devcycle.
    #[arg(long, default_value = "fixture:devcycle")]
    pub chain: String,
    /// One strategy (snake_case); every strategy when absent.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub multipliers: Vec<usize>,
    /// Tally proxy runs without sampling or fitting.
    #[arg(long)]
    pub count_only: bool,
    /// synthetic:<truth.json>; required unless --count-only.
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ValidateArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 4)]
    pub fixed_domains: usize,
    #[arg(long, default_value_t = 2)]
    pub added_domains: usize,
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    /// Budget grid entries `k:R` or `none`.
    #[arg(long, value_delimiter = ',', default_value = "none")]
    pub budgets: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TvArgs {
    /// Named mixture JSON.
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Compare the bundled reference mixtures instead.
    #[arg(long, conflicts_with = "a")]
    pub reference: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct KappaArgs {
    /// Ground-truth model JSON.
    #[arg(long, conflicts_with = "models", required_unless_present = "models")]
    pub truth: Option<PathBuf>,
    /// Fitted model set JSON (log-linear).
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Reused (unaffected) domains.
    #[arg(long, value_delimiter = ',', required = true)]
    pub fix: Vec<String>,
    /// Recomputed (affected) domains.
    #[arg(long, value_delimiter = ',', required = true)]
    pub comp: Vec<String>,
    /// Rank reused domains by how much recomputing each lowers kappa.
    #[arg(long)]
    pub rank: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only check recorded digests against the files on disk.
    #[arg(long)]
    pub verify_only: bool,
}

fn absolute(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p)?;
    Ok(())
}

fn absolute_opt(p: &mut Option<PathBuf>) -> Result<()> {
    p.as_mut().map(absolute).transpose()?;
    Ok(())
}

/// `prefix:path` and plain paths become absolute; `fixture:` names stay.
fn absolute_spec(s: &mut String) -> Result<()> {
    let (prefix, path) = match s.split_once(':') {
        Some(("fixture", _)) => return Ok(()),
        Some((p @ ("synthetic" | "results"), rest)) => (format!("{p}:"), rest.to_string()),
        _ => (String::new(), s.clone()),
    };
    *s = format!("{prefix}{}", std::path::absolute(path)?.display());
    Ok(())
}

impl Command {
    /// Makes every input path absolute so a manifest replays from any directory.
    pub fn resolve_inputs(&mut self) -> Result<()> {
        match self {
            Command::Truth(a) => absolute_spec(&mut a.domains),
            Command::Sample(a) => {
                absolute_spec(&mut a.domains)?;
                absolute_opt(&mut a.swarm.prior)?;
                a.oracle.as_mut().map(absolute_spec).transpose()?;
                Ok(())
            }
            Command::Fit(a) => {
                absolute(&mut a.swarm)?;
                absolute_opt(&mut a.fit.families)?;
                absolute_opt(&mut a.holdout)
            }
            Command::Optimize(a) => {
                absolute(&mut a.models)?;
                absolute_opt(&mut a.spec)
            }
            Command::Base(a) => {
                absolute_spec(&mut a.domains)?;
                absolute_spec(&mut a.oracle)?;
                absolute_opt(&mut a.swarm.prior)?;
                absolute_opt(&mut a.fit.families)
            }
            Command::Reuse(a) => {
                absolute(&mut a.chain)?;
                absolute(&mut a.update)?;
                absolute_spec(&mut a.oracle)
            }
            Command::Simulate(a) => {
                absolute_spec(&mut a.chain)?;
                a.oracle.as_mut().map(absolute_spec).transpose()?;
                Ok(())
            }
            Command::Validate(_) => Ok(()),
            Command::Tv(a) => {
                absolute_opt(&mut a.a)?;
                absolute_opt(&mut a.b)
            }
            Command::Kappa(a) => {
                absolute_opt(&mut a.truth)?;
                absolute_opt(&mut a.models)
            }
            Command::Replay(a) => absolute(&mut a.manifest),
        }
    }

    pub fn run(&self, ctx: &mut Ctx) -> Result<()> {
        match self {
            Command::Truth(a) => cmd_truth(ctx, a),
            Command::Sample(a) => cmd_sample(ctx, a),
            Command::Fit(a) => cmd_fit(ctx, a),
            Command::Optimize(a) => cmd_optimize(ctx, a),
            Command::Base(a) => cmd_base(ctx, a),
            Command::Reuse(a) => cmd_reuse(ctx, a),
            Command::Simulate(a) => cmd_simulate(ctx, a),
            Command::Validate(a) => cmd_validate(ctx, a),
            Command::Tv(a) => cmd_tv(ctx, a),
            Command::Kappa(a) => cmd_kappa(ctx, a),
            Command::Replay(_) => unreachable!("replay is dispatched by main"),
        }
    }
}

fn load_domains(ctx: &mut Ctx, spec: &str) -> Result<DomainSet> {
    match spec {
        "fixture:tokens" => Ok(fixtures::domain_tokens()?),
        "fixture:initial" => Ok(fixtures::devcycle_chain()?.initial),
        "fixture:final" => Ok(fixtures::devcycle_chain()?.domain_sets()?.pop().expect("chain has an initial set")),
        s if s.starts_with("fixture:") => bail!("unknown domain fixture `{s}`"),
        path => ctx.read_json(Path::new(path)),
    }
}

enum OracleSource {
    Synthetic(GroundTruthModel),
    Results(SwarmDataset),
}

fn load_oracle(ctx: &mut Ctx, spec: &str, d: Option<&DomainSet>) -> Result<OracleSource> {
    match spec.split_once(':') {
        Some(("synthetic", path)) => {
            let g: GroundTruthModel = ctx.read_json(Path::new(path))?;
            g.validate()?;
            Ok(OracleSource::Synthetic(g))
        }
        Some(("results", path)) => {
            let bytes = ctx.read(Path::new(path))?;
            Ok(OracleSource::Results(ingest_results_from(bytes.as_slice(), d)?))
        }
        _ => bail!("--oracle must be synthetic:<truth.json> or results:<csv>, got `{spec}`"),
    }
}

fn load_truth(ctx: &mut Ctx, spec: &str) -> Result<GroundTruthModel> {
    match load_oracle(ctx, spec, None)? {
        OracleSource::Synthetic(g) => Ok(g),
        OracleSource::Results(_) => bail!("this command scores new mixtures and needs a synthetic:<truth.json> oracle"),
    }
}

fn load_results(ctx: &mut Ctx, path: &Path, d: Option<&DomainSet>) -> Result<SwarmDataset> {
    let bytes = ctx.read(path)?;
    Ok(ingest_results_from(bytes.as_slice(), d)?)
}

fn results_csv(data: &SwarmDataset) -> Result<Vec<u8>> {
    let mut buf = vec![];
    data.write_csv_to(&mut buf)?;
    Ok(buf)
}

fn mixture_table(ctx: &mut Ctx, stem: &str, d: &DomainSet, p: &Mixture) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        domain: String,
        weight: f64,
        natural: f64,
    }
    let natural = natural_distribution(d)?;
    let rows: Vec<Row> = d
        .ids()
        .into_iter()
        .zip(p.weights().iter().zip(natural.weights()))
        .map(|(domain, (&weight, &natural))| Row { domain, weight, natural })
        .collect();
    ctx.write_table(stem, &rows, &["domain", "weight", "natural"], |r| {
        vec![r.domain.clone(), cell(r.weight), cell(r.natural)]
    })
}

fn cmd_truth(ctx: &mut Ctx, a: &TruthArgs) -> Result<()> {
    let d = load_domains(ctx, &a.domains)?;
    let seed = derive(ctx.seed, streams::TRUTH, 0);
    let g = match a.specialist {
        Some(s) => GroundTruthModel::specialist(a.tasks, &d.ids(), s, a.slope_sd, a.noise, seed)?,
        None => GroundTruthModel::random(a.tasks, &d.ids(), a.noise, seed)?,
    };
    ctx.write_json(&a.out, &g)?;
    println!("{} tasks over {} domains", g.n_tasks(), d.len());
    Ok(())
}

#[derive(Serialize)]
struct SwarmManifest<'a> {
    config: &'a SwarmConfig,
    domains: Vec<String>,
    mixtures: Vec<&'a [f64]>,
}

fn cmd_sample(ctx: &mut Ctx, a: &SampleArgs) -> Result<()> {
    let d = load_domains(ctx, &a.domains)?;
    let cfg = SwarmConfig {
        count: a.count,
        prior: match a.swarm.prior(ctx, &d)? {
            Some(p) => p,
            None => natural_distribution(&d)?,
        },
        concentration: a.swarm.concentration,
        sparsity: a.swarm.sparsity(),
        constrained: a.budget.budget()?,
        seed: ctx.seed,
    };
    let mixes = sample_swarm(&d, &cfg)?;
    ctx.write_json(
        &a.swarm_out,
        &SwarmManifest {
            config: &cfg,
            domains: d.ids(),
            mixtures: mixes.iter().map(Mixture::weights).collect(),
        },
    )?;
    if let Some(spec) = &a.oracle {
        let g = load_truth(ctx, spec)?;
        let data = mixopt_core::oracle::Oracle::evaluate(&g, &d.ids(), &mixes, derive(ctx.seed, streams::NOISE, 0))?;
        ctx.write("results.csv", &results_csv(&data)?)?;
    }
    println!("sampled {} mixtures over {} domains", mixes.len(), d.len());
    Ok(())
}

fn cmd_fit(ctx: &mut Ctx, a: &FitCmdArgs) -> Result<()> {
    let data = load_results(ctx, &a.swarm, None)?;
    let cfg = a.fit.config(ctx.seed)?;
    let gran = a.fit.granularity(ctx)?;
    let set = FittedModelSet::fit(&data, &gran, &cfg)?;
    for w in set.warnings() {
        ctx.warn(w);
    }
    ctx.write_json("models.json", &set)?;
    let score = match &a.holdout {
        Some(p) => {
            let holdout = load_results(ctx, p, None)?;
            Some(regression_fit_score(&set, &holdout)?)
        }
        None => None,
    };
    #[derive(Serialize)]
    struct FitReport {
        records: usize,
        units: usize,
        granularity: &'static str,
        holdout_score: Option<f64>,
    }
    ctx.write_json(
        "fit.json",
        &FitReport {
            records: data.len(),
            units: set.units.len(),
            granularity: set.granularity.tag(),
            holdout_score: score,
        },
    )?;
    match score {
        Some(s) => println!("fitted {} units; holdout score {s:.6}", set.units.len()),
        None => println!("fitted {} units", set.units.len()),
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveReport<'a> {
    domains: &'a [String],
    weights: &'a [f64],
    value: f64,
    surrogate_value: f64,
    kl: f64,
    active_caps: Vec<&'a str>,
    diagnostics: &'a mixopt_core::optimize::SolveDiagnostics,
}

fn solve_report<'a>(domains: &'a [String], out: &'a mixopt_core::SolveOutcome) -> SolveReport<'a> {
    SolveReport {
        domains,
        weights: out.mixture.weights(),
        value: out.value,
        surrogate_value: out.surrogate_value,
        kl: out.kl,
        active_caps: out.diagnostics.active_caps.iter().map(|&j| domains[j].as_str()).collect(),
        diagnostics: &out.diagnostics,
    }
}

fn cmd_optimize(ctx: &mut Ctx, a: &OptimizeArgs) -> Result<()> {
    let set: FittedModelSet = ctx.read_json(&a.models)?;
    let m = set.domains.len();
    let spec = match &a.spec {
        Some(p) => ctx.read_json::<SolveSpec>(p)?,
        None => {
            let solver = set.default_solver(derive(ctx.seed, streams::SEARCH, 0));
            SolveSpec::new(0.0, Mixture::uniform(m), None, solver)
        }
    };
    let obj = aggregate_objective(&set)?;
    let out = solve(&obj, &spec)?;
    if matches!(spec.solver, SolverKind::Exact { .. }) && !out.diagnostics.converged {
        ctx.not_converged = true;
        ctx.warn(format!(
            "solver stopped before convergence (projected gradient {:.2e})",
            out.diagnostics.projected_gradient_norm
        ));
    }
    ctx.write_json(&a.out, &solve_report(&set.domains, &out))?;
    println!("objective {:.9}", out.value);
    Ok(())
}

/// One line of a chain directory's history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainEntry {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<DomainUpdate>,
    pub strategy: String,
    pub seed: u64,
    pub domains: usize,
    pub dim: usize,
    pub runs: usize,
    pub cumulative_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reused_runs: Option<usize>,
    pub mixture: NamedMixture,
    pub warnings: Vec<String>,
}

fn write_chain(ctx: &mut Ctx, d: &DomainSet, mix: &Mixture, swarm: Option<&SwarmDataset>, log: &[ChainEntry]) -> Result<()> {
    ctx.write_json("domains.json", d)?;
    ctx.write_json("mixture.json", &NamedMixture::new(d, mix))?;
    if let Some(s) = swarm {
        ctx.write("swarm.csv", &results_csv(s)?)?;
    }
    ctx.write_json("chain.json", &log)?;
    mixture_table(ctx, "proposal", d, mix)
}

fn base_config(ctx: &mut Ctx, a: &BaseArgs, d: &DomainSet) -> Result<BaseConfig> {
    let mut cfg = BaseConfig::new(a.swarm_size.unwrap_or_else(|| scheduled_swarm_size(d.len(), 3)), ctx.seed);
    cfg.concentration = a.swarm.concentration;
    cfg.sparsity = a.swarm.sparsity();
    cfg.prior = a.swarm.prior(ctx, d)?;
    cfg.budget = a.budget.budget()?;
    cfg.lambda = a.lambda;
    cfg.solver = a.solver.map(|s| match s {
        SolverArg::Exact => SolverKind::exact(),
        SolverArg::Search => SolverKind::search(derive(ctx.seed, streams::SEARCH, 0)),
    });
    cfg.fit = a.fit.config(ctx.seed)?;
    cfg.granularity = a.fit.granularity(ctx)?;
    Ok(cfg)
}

fn note_solve(ctx: &mut Ctx, out: &BaseOutcome) {
    for w in &out.warnings {
        ctx.warn(w.clone());
    }
    if matches!(out.solve.diagnostics.solver.as_str(), "exact") && !out.solve.diagnostics.converged {
        ctx.not_converged = true;
    }
}

fn cmd_base(ctx: &mut Ctx, a: &BaseArgs) -> Result<()> {
    let d = load_domains(ctx, &a.domains)?;
    let cfg = base_config(ctx, a, &d)?;
    let out = match load_oracle(ctx, &a.oracle, Some(&d))? {
        OracleSource::Synthetic(g) => run_base(&d, &cfg, &g)?,
        OracleSource::Results(pool) => {
            let caps = match &cfg.budget {
                Some(b) => {
                    let c = repetition_caps(&d, b);
                    if !c.feasible {
                        return Err(mixopt_core::MixError::InfeasibleCaps { sum: c.caps.iter().sum() }.into());
                    }
                    Some(c.caps)
                }
                None => None,
            };
            fit_and_solve(&d, pool, caps, &cfg)?
        }
    };
    note_solve(ctx, &out);
    let entry = ChainEntry {
        label: "initial".into(),
        update: None,
        strategy: "base".into(),
        seed: ctx.seed,
        domains: d.len(),
        dim: d.len(),
        runs: out.swarm.len(),
        cumulative_runs: out.swarm.len(),
        reused_runs: None,
        mixture: NamedMixture::new(&d, &out.solve.mixture),
        warnings: out.warnings.clone(),
    };
    write_chain(ctx, &d, &out.solve.mixture, Some(&out.swarm), &[entry])?;
    ctx.write_json("models.json", &out.models)?;
    ctx.write_json("solve.json", &solve_report(&out.models.domains, &out.solve))?;
    println!("proposed mixture over {} domains from {} runs", d.len(), out.swarm.len());
    Ok(())
}

/// Parses `full-recompute`, `full-reuse`, `partial-reuse:<ids>` or `swarm-reuse`.
fn parse_strategy(s: &str) -> Result<(Strategy, Vec<String>)> {
    let s = s.replace('-', "_");
    if let Some(ids) = s.strip_prefix("partial_reuse:") {
        let ids: Vec<String> = ids.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect();
        if ids.is_empty() {
            bail!("partial-reuse needs at least one domain id");
        }
        return Ok((Strategy::PartialReuse, ids));
    }
    match s.parse::<Strategy>()? {
        Strategy::PartialReuse => bail!("partial-reuse needs ids: partial-reuse:<id,id,...>"),
        st => Ok((st, vec![])),
    }
}

fn cmd_reuse(ctx: &mut Ctx, a: &ReuseArgs) -> Result<()> {
    let (strategy, partial) = parse_strategy(&a.strategy)?;
    let prev_set: DomainSet = ctx.read_json(&a.chain.join("domains.json"))?;
    let prev: NamedMixture = ctx.read_json(&a.chain.join("mixture.json"))?;
    let mut log: Vec<ChainEntry> = ctx.read_json(&a.chain.join("chain.json"))?;
    let swarm_path = a.chain.join("swarm.csv");
    let pool = if swarm_path.exists() {
        load_results(ctx, &swarm_path, Some(&prev_set))?
    } else if strategy == Strategy::SwarmReuse {
        bail!("swarm-reuse needs swarm.csv in {}", a.chain.display());
    } else {
        SwarmDataset {
            domains: prev_set.ids(),
            tasks: vec![],
            records: vec![],
        }
    };
    let update: DomainUpdate = ctx.read_json(&a.update)?;
    update.validate()?;
    let truth = load_truth(ctx, &a.oracle)?;
    let stage = ChainStage {
        label: a.label.clone().unwrap_or_else(|| format!("update-{}", log.len())),
        update,
        partial_groups: if partial.is_empty() { vec![] } else { vec![partial] },
    };
    let mut cfg = BaseConfig::new(0, ctx.seed);
    cfg.lambda = a.lambda;
    cfg.budget = a.budget.budget()?;
    let step = apply_strategy(&prev_set, &prev, &pool, &stage, strategy, a.multiplier, &cfg, &truth)?;
    for w in &step.warnings {
        ctx.warn(w.clone());
        if w.starts_with("solver stopped before convergence") {
            ctx.not_converged = true;
        }
    }
    let cumulative = log.last().map_or(0, |e| e.cumulative_runs) + step.runs;
    log.push(ChainEntry {
        label: stage.label.clone(),
        update: Some(stage.update.clone()),
        strategy: a.strategy.clone(),
        seed: ctx.seed,
        domains: step.domains.len(),
        dim: step.dim,
        runs: step.runs,
        cumulative_runs: cumulative,
        reused_runs: step.reused_runs,
        mixture: NamedMixture::new(&step.domains, &step.mixture),
        warnings: step.warnings.clone(),
    });
    // a carried pool that no longer matches the domains is dropped
    let carried = step.pool.as_ref().or((pool.domains == step.domains.ids() && !pool.is_empty()).then_some(&pool));
    write_chain(ctx, &step.domains, &step.mixture, carried, &log)?;
    println!(
        "{}: {} domains, optimized over {}, {} new runs ({} total)",
        stage.label,
        step.domains.len(),
        step.dim,
        step.runs,
        cumulative
    );
    Ok(())
}

fn load_chain(ctx: &mut Ctx, spec: &str) -> Result<DevChain> {
    match spec {
        "fixture:devcycle" => Ok(fixtures::devcycle_chain()?),
        s if s.starts_with("fixture:") => bail!("unknown chain fixture `{s}`"),
        path => ctx.read_json(Path::new(path)),
    }
}

#[derive(Serialize)]
struct RunRow {
    strategy: &'static str,
    multiplier: usize,
    stage: String,
    domains: usize,
    dim: usize,
    runs: usize,
    cumulative_runs: usize,
    truth_value: Option<f64>,
    truth_optimum: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> Result<()> {
    let chain = load_chain(ctx, &a.chain)?;
    let strategies = match &a.strategy {
        Some(s) => vec![s.parse::<Strategy>()?],
        None => Strategy::ALL.to_vec(),
    };
    let truth = match (&a.oracle, a.count_only) {
        (_, true) => None,
        (Some(spec), false) => Some(load_truth(ctx, spec)?),
        (None, false) => bail!("simulate needs --oracle synthetic:<truth.json> unless --count-only"),
    };
    let mut reports: Vec<DevcycleReport> = vec![];
    for &st in &strategies {
        for &c in &a.multipliers {
            let report = match &truth {
                None => count_runs(&chain, st, c)?,
                Some(g) => {
                    let mut base = BaseConfig::new(0, ctx.seed);
                    base.lambda = a.lambda;
                    let cfg = DevcycleConfig {
                        multiplier: c,
                        base,
                        seed: ctx.seed,
                    };
                    simulate_devcycle(&chain, st, &cfg, g)?
                }
            };
            for s in &report.stages {
                for w in &s.warnings {
                    ctx.warn(format!("{} c={c} {}: {w}", st.name(), s.label));
                }
            }
            println!("{} c={c}: {} runs", st.name(), report.total_runs);
            reports.push(report);
        }
    }
    let rows: Vec<RunRow> = reports
        .iter()
        .flat_map(|r| {
            r.stages.iter().map(move |s| RunRow {
                strategy: r.strategy.name(),
                multiplier: r.multiplier,
                stage: s.label.clone(),
                domains: s.domains,
                dim: s.dim,
                runs: s.runs,
                cumulative_runs: s.cumulative_runs,
                truth_value: s.truth_value,
                truth_optimum: s.truth_optimum,
            })
        })
        .collect();
    ctx.write_table(
        "frontier",
        &rows,
        &["strategy", "multiplier", "stage", "domains", "dim", "runs", "cumulative_runs", "truth_value", "truth_optimum"],
        |r| {
            vec![
                r.strategy.to_string(),
                r.multiplier.to_string(),
                r.stage.clone(),
                r.domains.to_string(),
                r.dim.to_string(),
                r.runs.to_string(),
                r.cumulative_runs.to_string(),
                opt_cell(r.truth_value),
                opt_cell(r.truth_optimum),
            ]
        },
    )?;
    if truth.is_some() {
        ctx.write_json("devcycle.json", &reports)?;
    }
    Ok(())
}

fn parse_budget(s: &str) -> Result<Option<RepetitionBudget>> {
    if s == "none" {
        return Ok(None);
    }
    let (k, r) = s.split_once(':').ok_or_else(|| anyhow!("budget `{s}` is not k:R or none"))?;
    Ok(Some(RepetitionBudget::new(
        k.parse().with_context(|| format!("budget k in `{s}`"))?,
        r.parse().with_context(|| format!("budget R in `{s}`"))?,
    )?))
}

fn cmd_validate(ctx: &mut Ctx, a: &ValidateArgs) -> Result<()> {
    let cfg = ValidateConfig {
        instances: a.instances,
        fixed_domains: a.fixed_domains,
        added_domains: a.added_domains,
        tasks: a.tasks,
        budgets: a.budgets.iter().map(|b| parse_budget(b)).collect::<Result<_>>()?,
        seed: ctx.seed,
    };
    let report = validate_theorems(&cfg)?;
    ctx.write_table(
        "gap_audits",
        &report.gap_rows,
        &[
            "instance", "seed", "budget", "candidate", "reuse_gap", "performance_gap", "bound", "constant", "mu", "kappa",
            "rho_star", "holds", "mutual_feasible",
        ],
        |r| {
            vec![
                r.instance.to_string(),
                r.seed.to_string(),
                r.budget.to_string(),
                r.candidate.clone(),
                cell(r.reuse_gap),
                cell(r.performance_gap),
                cell(r.bound),
                cell(r.constant),
                cell(r.mu),
                cell(r.kappa),
                cell(r.rho_star),
                r.holds.to_string(),
                r.mutual_feasible.to_string(),
            ]
        },
    )?;
    ctx.write_table(
        "add_audits",
        &report.add_rows,
        &["instance", "seed", "budget", "reuse_gap", "bound", "kappa", "one_minus_rho", "holds", "mutual_feasible", "monotone"],
        |r| {
            vec![
                r.instance.to_string(),
                r.seed.to_string(),
                r.budget.to_string(),
                cell(r.reuse_gap),
                cell(r.bound),
                cell(r.kappa),
                cell(r.one_minus_rho),
                r.holds.to_string(),
                r.mutual_feasible.to_string(),
                r.monotone.to_string(),
            ]
        },
    )?;
    ctx.write_json("summary.json", &report.summary)?;
    let s = &report.summary;
    println!(
        "gap bound holds {}/{} applicable ({} audited); add bound holds {}/{} applicable ({} audited); monotone {}",
        s.gap_holds, s.gap_feasible, s.gap_audits, s.add_holds, s.add_feasible, s.add_audits, s.monotone
    );
    Ok(())
}

/// Weights keyed by domain over the union of both id lists; absent means zero.
fn union_weights(a: &NamedMixture, b: &NamedMixture) -> (Vec<f64>, Vec<f64>) {
    let ma: BTreeMap<&str, f64> = a.domains.iter().map(String::as_str).zip(a.weights.iter().copied()).collect();
    let mb: BTreeMap<&str, f64> = b.domains.iter().map(String::as_str).zip(b.weights.iter().copied()).collect();
    let ids: std::collections::BTreeSet<&str> = ma.keys().chain(mb.keys()).copied().collect();
    ids.into_iter()
        .map(|id| (ma.get(id).copied().unwrap_or(0.0), mb.get(id).copied().unwrap_or(0.0)))
        .unzip()
}

#[derive(Serialize)]
struct TvRow {
    a: String,
    b: String,
    tv: f64,
    max_abs_deviation: f64,
}

fn cmd_tv(ctx: &mut Ctx, a: &TvArgs) -> Result<()> {
    let mut pairs: Vec<(String, String, Vec<f64>, Vec<f64>)> = vec![];
    if a.reference {
        let rows = fixtures::reference_mixtures()?;
        let col = |f: fn(&fixtures::ReferenceRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let (natural, full, partial) = (col(|r| r.natural), col(|r| r.full_recompute), col(|r| r.partial_reuse));
        pairs.push(("partial_reuse".into(), "full_recompute".into(), partial.clone(), full));
        pairs.push(("partial_reuse".into(), "natural".into(), partial, natural));
    } else {
        let (pa, pb) = (a.a.as_ref(), a.b.as_ref());
        let (pa, pb) = pa.zip(pb).ok_or_else(|| anyhow!("tv needs --a and --b, or --reference"))?;
        let (ma, mb): (NamedMixture, NamedMixture) = (ctx.read_json(pa)?, ctx.read_json(pb)?);
        let (wa, wb) = union_weights(&ma, &mb);
        pairs.push((pa.display().to_string(), pb.display().to_string(), wa, wb));
    }
    let rows = pairs
        .into_iter()
        .map(|(na, nb, wa, wb)| {
            Ok(TvRow {
                tv: tv_distance(&wa, &wb)?,
                max_abs_deviation: max_abs_deviation(&wa, &wb)?,
                a: na,
                b: nb,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for r in &rows {
        println!("{} vs {}: tv {:.6}, max deviation {:.6}", r.a, r.b, r.tv, r.max_abs_deviation);
    }
    ctx.write_table("tv", &rows, &["a", "b", "tv", "max_abs_deviation"], |r| {
        vec![r.a.clone(), r.b.clone(), cell(r.tv), cell(r.max_abs_deviation)]
    })
}

fn cmd_kappa(ctx: &mut Ctx, a: &KappaArgs) -> Result<()> {
    enum Src {
        Truth(GroundTruthModel),
        Models(FittedModelSet),
    }
    let src = match (&a.truth, &a.models) {
        (Some(p), _) => Src::Truth(ctx.read_json(p)?),
        (None, Some(p)) => Src::Models(ctx.read_json(p)?),
        (None, None) => bail!("kappa needs --truth or --models"),
    };
    let (report, ranking): (_, Option<Vec<RecomputeCandidate>>) = match &src {
        Src::Truth(g) => (
            coupling_kappa(g, &a.fix, &a.comp)?,
            a.rank.then(|| rank_recompute_candidates(g, &a.fix, &a.comp)).transpose()?,
        ),
        Src::Models(m) => (
            coupling_kappa(m, &a.fix, &a.comp)?,
            a.rank.then(|| rank_recompute_candidates(m, &a.fix, &a.comp)).transpose()?,
        ),
    };
    println!("kappa {:.9}", report.kappa);
    ctx.write_json("kappa.json", &report)?;
    if let Some(r) = ranking {
        if let Some(top) = r.first() {
            println!("recompute first: {} (kappa drops by {:.6})", top.id, top.delta_kappa);
        }
        ctx.write_table("ranking", &r, &["id", "kappa", "delta_kappa"], |c| {
            vec![c.id.clone(), cell(c.kappa), cell(c.delta_kappa)]
        })?;
    }
    Ok(())
}
