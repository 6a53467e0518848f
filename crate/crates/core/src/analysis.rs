//! Diagnostics for reuse: coupling, reuse and performance gaps, the explicit
//! gap bounds, and plain comparison metrics between mixtures.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::domain::{apply_update, natural_distribution, repetition_caps, DomainSet, DomainUpdate, Mixture, RepetitionBudget, UpdateKind};
use crate::error::{MixError, Result};
use crate::optimize::{project_capped_simplex, solve_exact, Negated, SolveSpec, SolverKind};
use crate::oracle::{truth_optimum, GroundTruthModel};
use crate::regression::{FittedModelSet, LogLinearObjective};
use crate::reuse::{collapse, collapsed_caps, expand, ReusePlan};
use crate::rng::{streams, substream};
use crate::swarm::dirichlet_draw;

/// Slack allowed when checking a bound or a cap numerically.
pub const AUDIT_TOL: f64 = 1e-9;
/// Feasible points sampled per strong-convexity estimate.
pub const MU_SAMPLES: usize = 200;
pub const MU_FLOOR: f64 = 1e-8;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MixError::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// `0.5 * sum |a_j - b_j|`.
pub fn tv_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Largest single-domain absolute difference.
pub fn max_abs_deviation(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks for ties.
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(MixError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MixError::LengthMismatch(xs.len(), 2));
    }
    crate::regression::pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Anything that exposes one log-linear slope vector per task (or unit).
pub trait SlopeSource {
    fn slope_domains(&self) -> &[String];
    fn slope_rows(&self) -> Result<Vec<Vec<f64>>>;
}

impl SlopeSource for GroundTruthModel {
    fn slope_domains(&self) -> &[String] {
        &self.domains
    }

    fn slope_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.slopes.clone())
    }
}

impl SlopeSource for FittedModelSet {
    fn slope_domains(&self) -> &[String] {
        &self.domains
    }

    fn slope_rows(&self) -> Result<Vec<Vec<f64>>> {
        match self.log_linear() {
            Some(obj) => Ok(obj.slopes),
            None => {
                let bad = self
                    .units
                    .iter()
                    .find(|u| !matches!(u.model.model, crate::regression::ModelFamily::LogLinear { .. }))
                    .map_or("unknown", |u| u.model.model.name());
                Err(MixError::WrongFamily(bad.into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    /// `||A_i,fix||` per task.
    pub alpha_fix: Vec<f64>,
    /// `||A_i,comp||` per task.
    pub alpha_comp: Vec<f64>,
    pub kappa: f64,
    /// `(1 + alpha_fix + alpha_comp) * alpha_fix` per task; kappa is their norm.
    pub contributions: Vec<f64>,
}

/// `||(1 + a_fix + a_comp) (.) a_fix||`.
pub fn kappa_from_norms(alpha_fix: &[f64], alpha_comp: &[f64]) -> f64 {
    norm(&contributions(alpha_fix, alpha_comp))
}

fn contributions(alpha_fix: &[f64], alpha_comp: &[f64]) -> Vec<f64> {
    alpha_fix
        .iter()
        .zip(alpha_comp)
        .map(|(f, c)| (1.0 + f + c) * f)
        .collect()
}

fn split_columns(domains: &[String], fix: &[String], comp: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    let find = |id: &String| {
        domains
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| MixError::UnknownDomain(id.clone()))
    };
    let f: Vec<usize> = fix.iter().map(find).collect::<Result<_>>()?;
    let c: Vec<usize> = comp.iter().map(find).collect::<Result<_>>()?;
    let all: BTreeSet<usize> = f.iter().chain(&c).copied().collect();
    if all.len() != f.len() + c.len() {
        return Err(MixError::InvalidPlan("reused and recomputed sets overlap".into()));
    }
    if all.len() != domains.len() {
        return Err(MixError::InvalidPlan("reused and recomputed sets must cover the domains".into()));
    }
    Ok((f, c))
}

fn part_norms(rows: &[Vec<f64>], cols: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|a| cols.iter().map(|&j| a[j] * a[j]).sum::<f64>().sqrt())
        .collect()
}

/// Splits each slope vector by the `fix`/`comp` partition and evaluates kappa.
pub fn coupling_kappa<S: SlopeSource + ?Sized>(src: &S, fix: &[String], comp: &[String]) -> Result<CouplingReport> {
    let rows = src.slope_rows()?;
    let (f, c) = split_columns(src.slope_domains(), fix, comp)?;
    let alpha_fix = part_norms(&rows, &f);
    let alpha_comp = part_norms(&rows, &c);
    let contributions = contributions(&alpha_fix, &alpha_comp);
    Ok(CouplingReport {
        kappa: norm(&contributions),
        alpha_fix,
        alpha_comp,
        contributions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputeCandidate {
    pub id: String,
    /// Kappa after moving `id` into the recomputed set.
    pub kappa: f64,
    /// Reduction relative to reusing every unaffected domain.
    pub delta_kappa: f64,
}

/// Scores each unaffected domain by how much recomputing it lowers kappa;
/// largest reduction first, ties by id.
pub fn rank_recompute_candidates<S: SlopeSource + ?Sized>(
    src: &S,
    unaffected: &[String],
    affected: &[String],
) -> Result<Vec<RecomputeCandidate>> {
    let base = coupling_kappa(src, unaffected, affected)?.kappa;
    let mut out = unaffected
        .iter()
        .map(|id| {
            let fix: Vec<String> = unaffected.iter().filter(|u| *u != id).cloned().collect();
            let mut comp = affected.to_vec();
            comp.push(id.clone());
            let kappa = coupling_kappa(src, &fix, &comp)?.kappa;
            Ok(RecomputeCandidate {
                id: id.clone(),
                kappa,
                delta_kappa: base - kappa,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.delta_kappa.total_cmp(&a.delta_kappa).then_with(|| a.id.cmp(&b.id)));
    Ok(out)
}

/// Mean noiseless loss of the truth at `p`.
pub fn truth_loss(g: &GroundTruthModel, p: &[f64]) -> f64 {
    use crate::optimize::Objective;
    g.objective().value(p)
}

/// Mean noiseless loss without the offsets.
pub fn truth_fbar(g: &GroundTruthModel, p: &[f64]) -> f64 {
    g.objective().fbar(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `||p~_fix - q*_fix||`, Euclidean.
    pub reuse_gap: f64,
    /// `F(reuse result) - F(full result)` on the noiseless truth.
    pub performance_gap: f64,
    /// Weight the full result puts on the reused domains.
    pub rho_star: f64,
    pub one_minus_rho: f64,
}

fn fix_part(plan: &ReusePlan, q: &[f64]) -> (Vec<f64>, f64) {
    let w: Vec<f64> = plan
        .d_fix()
        .iter()
        .map(|id| q[plan.post_update.index_of(id).expect("validated")])
        .collect();
    let rho: f64 = w.iter().sum();
    (w, rho)
}

fn normalized(w: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = w.iter().sum();
    (s > 0.0).then(|| w.iter().map(|x| x / s).collect())
}

fn frozen(plan: &ReusePlan, reuse: &[f64]) -> Result<Vec<f64>> {
    if let [g] = plan.groups.as_slice() {
        return Ok(g.ratios.weights().to_vec());
    }
    normalized(&fix_part(plan, reuse).0)
        .ok_or_else(|| MixError::InvalidPlan("reuse result has no weight on reused domains".into()))
}

/// Compares a reuse result with a full recomputation on the noiseless truth.
pub fn gap_report(truth: &GroundTruthModel, plan: &ReusePlan, reuse: &Mixture, full: &Mixture) -> Result<GapReport> {
    let m = plan.post_update.len();
    same_len(m, reuse.len())?;
    same_len(m, full.len())?;
    let g = truth.on(&plan.post_update)?.noiseless();
    let (fw, rho) = fix_part(plan, full.weights());
    let q_fix = normalized(&fw)
        .ok_or_else(|| MixError::InvalidPlan("full result has no weight on reused domains".into()))?;
    let p_fix = frozen(plan, reuse.weights())?;
    let rho = rho.clamp(0.0, 1.0);
    Ok(GapReport {
        reuse_gap: euclid(&p_fix, &q_fix),
        performance_gap: truth_loss(&g, reuse.weights()) - truth_loss(&g, full.weights()),
        rho_star: rho,
        one_minus_rho: 1.0 - rho,
    })
}

fn audit_spec(p0: Mixture, caps: Option<Vec<f64>>) -> SolveSpec {
    SolveSpec::new(
        0.0,
        p0,
        caps,
        SolverKind::Exact {
            tol: 1e-11,
            max_iters: 200_000,
        },
    )
}

/// The exact reuse answer on the truth: the collapsed truth minimized under
/// collapsed caps, then expanded.
pub fn reuse_truth_optimum(truth: &GroundTruthModel, plan: &ReusePlan, budget: Option<&RepetitionBudget>) -> Result<Mixture> {
    let cg = plan.collapsed_truth(&truth.noiseless())?;
    let caps = budget.map(|b| collapsed_caps(plan, b)).transpose()?;
    let r0 = natural_distribution(&plan.collapsed_domains()?)?;
    let out = solve_exact(&cg.objective(), &audit_spec(r0, caps))?;
    expand(plan, &plan.from_collapsed_vector(out.mixture.weights())?)
}

/// Orthonormal basis of `{x : sum x = 0}` as columns.
fn tangent_basis(d: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(d, d.saturating_sub(1));
    for k in 1..d {
        let s = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            z[(i, k - 1)] = 1.0 / s;
        }
        z[(k, k - 1)] = -(k as f64) / s;
    }
    z
}

/// Smallest eigenvalue of the Hessian restricted to the simplex tangent space.
pub fn tangent_min_eigenvalue(obj: &LogLinearObjective, p: &[f64]) -> f64 {
    let d = p.len();
    if d < 2 {
        return f64::INFINITY;
    }
    let z = tangent_basis(d);
    let h = z.transpose() * obj.hessian(p) * &z;
    SymmetricEigen::new(h).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Minimum tangent-space curvature over `samples` feasible points (uniform
/// Dirichlet draws projected onto the caps) plus `extra`, floored at `MU_FLOOR`.
pub fn estimate_strong_convexity(
    obj: &LogLinearObjective,
    caps: Option<&[f64]>,
    extra: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use crate::optimize::Objective;
    let d = obj.dim();
    let mut rng = substream(seed, streams::MU, 0);
    let ones = vec![1.0; d];
    let mut mu = f64::INFINITY;
    for p in extra {
        mu = mu.min(tangent_min_eigenvalue(obj, p));
    }
    for _ in 0..samples {
        let mut p = dirichlet_draw(&mut rng, &ones);
        if let Some(c) = caps {
            if p.iter().zip(c).any(|(x, u)| x > u) {
                p = project_capped_simplex(&p, c)?;
            }
        }
        mu = mu.min(tangent_min_eigenvalue(obj, &p));
    }
    Ok(mu.max(MU_FLOOR))
}

fn check_mu(mu: f64) -> Result<f64> {
    if mu > 0.0 && mu.is_finite() {
        Ok(mu)
    } else {
        Err(MixError::NonPositiveMu(mu))
    }
}

fn with_ratios(plan: &ReusePlan, ratios: &[f64]) -> Result<ReusePlan> {
    let [g] = plan.groups.as_slice() else {
        return Err(MixError::InvalidPlan("bound audits take a single reused group".into()));
    };
    ReusePlan::new(plan.post_update.clone(), g.ids.clone(), Mixture::new(ratios.to_vec())?)
}

fn within(r: &[f64], caps: &[f64]) -> bool {
    r.iter().zip(caps).all(|(x, u)| *x <= u + AUDIT_TOL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub constant: f64,
    pub bound: f64,
    pub performance_gap: f64,
    pub reuse_gap: f64,
    pub holds: bool,
    pub mu: f64,
    pub a_max: f64,
    pub kappa: f64,
    pub rho_star: f64,
    /// Each reuse answer is feasible under the other's collapsed caps.
    pub mutual_feasible: bool,
    pub fbar_full: f64,
    pub fbar_reuse: f64,
}

/// Evaluates the explicit performance-gap bound for reusing the plan's single
/// frozen group, with every quantity computed on the noiseless truth.
///
/// `mu` defaults to the sampled tangent-space curvature of the collapsed truth
/// over the segment between the frozen and the optimal ratios.
pub fn theorem1_constant(
    truth: &GroundTruthModel,
    plan: &ReusePlan,
    budget: Option<&RepetitionBudget>,
    mu: Option<f64>,
    seed: u64,
) -> Result<Theorem1Report> {
    let post = &plan.post_update;
    let g = truth.on(post)?.noiseless();
    let caps = budget.map(|b| repetition_caps(post, b).caps);
    let full = truth_optimum(&g, caps, 0.0, &natural_distribution(post)?)?.mixture;
    let (fw, rho) = fix_part(plan, full.weights());
    let q_fix = normalized(&fw)
        .ok_or_else(|| MixError::InvalidPlan("optimum places no weight on the reused domains".into()))?;
    let p_fix = frozen(plan, &[])?;
    let reuse = reuse_truth_optimum(&g, plan, budget)?;

    let cp = coupling_kappa(&g, &plan.d_fix(), &plan.d_comp)?;
    let a_max = cp.alpha_fix.iter().cloned().fold(0.0, f64::max);
    let delta = euclid(&p_fix, &q_fix);

    let mu = match mu {
        Some(m) => check_mu(m)?,
        None => {
            let mut best = f64::INFINITY;
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let ratios: Vec<f64> = p_fix.iter().zip(&q_fix).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let p = with_ratios(plan, &ratios)?;
                let obj = p.collapsed_truth(&g)?.objective();
                let pc = budget.map(|b| collapsed_caps(&p, b)).transpose()?;
                let here = p.to_collapsed_vector(&collapse(&p, &reuse)?.0)?;
                let there = p.to_collapsed_vector(&collapse(&p, &full)?.0)?;
                let k = crate::rng::derive(seed, streams::MU, (t * 4.0) as u64);
                best = best.min(estimate_strong_convexity(&obj, pc.as_deref(), &[here, there], MU_SAMPLES, k)?);
            }
            check_mu(best)?
        }
    };

    let mutual_feasible = match budget {
        None => true,
        Some(b) => {
            let at_p = plan.clone();
            let at_q = with_ratios(plan, &q_fix)?;
            let r_p = at_p.to_collapsed_vector(&collapse(&at_p, &reuse)?.0)?;
            let r_q = at_q.to_collapsed_vector(&collapse(&at_q, &full)?.0)?;
            let caps_p = collapsed_caps(&at_p, b)?;
            let caps_q = collapsed_caps(&at_q, b)?;
            within(&r_p, &caps_q) && within(&r_q, &caps_p)
        }
    };

    let fbar_full = truth_fbar(&g, full.weights());
    let fbar_reuse = truth_fbar(&g, reuse.weights());
    let sum_norm = norm(&cp.alpha_fix.iter().zip(&cp.alpha_comp).map(|(a, b)| a + b).collect::<Vec<_>>());
    let constant = fbar_full * (a_max * delta).exp() * (fbar_reuse / mu * sum_norm * cp.kappa + norm(&cp.alpha_fix));
    let bound = constant * delta;
    let performance_gap = truth_loss(&g, reuse.weights()) - truth_loss(&g, full.weights());
    Ok(Theorem1Report {
        constant,
        bound,
        performance_gap,
        reuse_gap: delta,
        holds: performance_gap <= bound + AUDIT_TOL,
        mu,
        a_max,
        kappa: cp.kappa,
        rho_star: rho.clamp(0.0, 1.0),
        mutual_feasible,
        fbar_full,
        fbar_reuse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub bound: f64,
    pub reuse_gap: f64,
    pub holds: bool,
    pub mu1: f64,
    pub c_max: f64,
    pub kappa: f64,
    pub rho_star: f64,
    pub one_minus_rho: f64,
    pub mutual_feasible: bool,
    /// The pre-update optimum that gets reused, over the pre-update domains.
    pub reused: Mixture,
    pub fbar_full: f64,
}

/// Evaluates the explicit reuse-gap bound for an Add update, where the reused
/// mix is the pre-update optimum on the noiseless truth.
pub fn theorem2_bound(
    truth: &GroundTruthModel,
    pre: &DomainSet,
    update: &DomainUpdate,
    budget: Option<&RepetitionBudget>,
    mu1: Option<f64>,
    seed: u64,
) -> Result<Theorem2Report> {
    if update.kind != UpdateKind::Add {
        return Err(MixError::WrongUpdateKind(update.kind.to_string()));
    }
    let post = apply_update(pre, update)?.domains;
    let g_pre = truth.on(pre)?.noiseless();
    let g = truth.on(&post)?.noiseless();
    let pre_caps = budget.map(|b| repetition_caps(pre, b).caps);
    let p_tilde = truth_optimum(&g_pre, pre_caps.clone(), 0.0, &natural_distribution(pre)?)?.mixture;
    let post_caps = budget.map(|b| repetition_caps(&post, b).caps);
    let full = truth_optimum(&g, post_caps, 0.0, &natural_distribution(&post)?)?.mixture;

    let fix = pre.ids();
    let comp: Vec<String> = update.introduced.iter().map(|d| d.id.clone()).collect();
    let plan = ReusePlan::new(post.clone(), fix.clone(), p_tilde.clone())?;
    let (fw, rho) = fix_part(&plan, full.weights());
    let rho = rho.clamp(0.0, 1.0);
    let q_fix = normalized(&fw)
        .ok_or_else(|| MixError::InvalidPlan("optimum places no weight on the reused domains".into()))?;
    let reuse_gap = euclid(p_tilde.weights(), &q_fix);

    let cp = coupling_kappa(&g, &fix, &comp)?;
    let c_max = cp
        .alpha_fix
        .iter()
        .zip(&cp.alpha_comp)
        .map(|(a, b)| a + b)
        .fold(0.0, f64::max);
    let mu1 = match mu1 {
        Some(m) => check_mu(m)?,
        None => check_mu(estimate_strong_convexity(
            &g_pre.objective(),
            pre_caps.as_deref(),
            &[p_tilde.weights().to_vec(), q_fix.clone()],
            MU_SAMPLES,
            seed,
        )?)?,
    };
    let mutual_feasible = match budget {
        None => true,
        Some(b) => pre.domains().iter().enumerate().all(|(j, d)| {
            let cap = b.cap_for(d.tokens);
            let relaxed = if rho > 0.0 { (cap / rho).min(1.0) } else { 1.0 };
            p_tilde.weights()[j] <= relaxed + AUDIT_TOL && q_fix[j] <= cap + AUDIT_TOL
        }),
    };
    let fbar_full = truth_fbar(&g, full.weights());
    let bound = 2.0 * fbar_full * (c_max * (1.0 - rho)).exp() / mu1 * cp.kappa * (1.0 - rho);
    Ok(Theorem2Report {
        bound,
        reuse_gap,
        holds: reuse_gap <= bound + AUDIT_TOL,
        mu1,
        c_max,
        kappa: cp.kappa,
        rho_star: rho,
        one_minus_rho: 1.0 - rho,
        mutual_feasible,
        reused: p_tilde,
        fbar_full,
    })
}

/// A deliberately poor reuse candidate: the truth maximized over the reused
/// domains alone.
pub fn weak_mix(truth: &GroundTruthModel, fix: &[String], budget_caps: Option<Vec<f64>>) -> Result<Mixture> {
    let g = truth.restrict(fix)?.noiseless();
    let spec = audit_spec(Mixture::uniform(fix.len()), budget_caps);
    Ok(solve_exact(&Negated(g.objective()), &spec)?.mixture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use proptest::prelude::*;

    fn ids(prefix: &str, m: usize) -> Vec<String> {
        (0..m).map(|j| format!("{prefix}{j}")).collect()
    }

    fn truth(slopes: Vec<Vec<f64>>, domains: Vec<String>) -> GroundTruthModel {
        let n = slopes.len();
        GroundTruthModel::new(ids("t", n), domains, vec![0.5; n], slopes, 0.0).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
        assert!((max_abs_deviation(&[0.2, 0.5, 0.3], &[0.1, 0.8, 0.1]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((rank_correlation(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = xs.iter().rev().cloned().collect();
        assert!((rank_correlation(&xs, &rev).unwrap() + 1.0).abs() < 1e-12);
        // ys ranks with a tie: [1, 2.5, 2.5, 4, 5]; no other ties, so
        // rho = cov(r_x, r_y) / (sd sd) by hand: 9.5 / sqrt(10 * 9.5)
        let ys = [10.0, 20.0, 20.0, 40.0, 50.0];
        let want = 9.5 / (10.0f64 * 9.5).sqrt();
        assert!((rank_correlation(&xs, &ys).unwrap() - want).abs() < 1e-12);
        assert!(matches!(rank_correlation(&xs, &ys[..3]), Err(MixError::LengthMismatch(5, 3))));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_from_norms(&[1.0], &[1.0]), 3.0);
        let g = truth(vec![vec![0.0, 0.0, 0.7], vec![0.0, 0.0, -0.2]], ids("d", 3));
        let r = coupling_kappa(&g, &ids("d", 2), &["d2".into()]).unwrap();
        assert_eq!(r.kappa, 0.0);
        let r = coupling_kappa(&g, &["d2".into()], &ids("d", 2)).unwrap();
        assert!(r.kappa > 0.0);
        assert!(coupling_kappa(&g, &["d0".into()], &["d1".into()]).is_err());
    }

    #[test]
    fn ranking_examples() {
        // d0 couples with the recomputed domain through task 0; the rest are symmetric
        let g = truth(
            vec![vec![2.0, 0.1, 0.1, 0.1, 1.0], vec![0.0, 0.1, 0.1, 0.1, 0.0], vec![0.0, 0.0, 0.0, 0.0, 0.0]],
            ids("d", 5),
        );
        let ranked = rank_recompute_candidates(&g, &ids("d", 4), &["d4".into()]).unwrap();
        assert_eq!(ranked[0].id, "d0");
        assert!((ranked[1].delta_kappa - ranked[2].delta_kappa).abs() < 1e-9);
        assert!((ranked[2].delta_kappa - ranked[3].delta_kappa).abs() < 1e-9);

        let g = truth(vec![vec![0.0, 0.5, 0.3], vec![0.0, -0.4, 0.2]], ids("d", 3));
        let ranked = rank_recompute_candidates(&g, &ids("d", 2), &["d2".into()]).unwrap();
        let zero = ranked.iter().find(|c| c.id == "d0").unwrap();
        assert!(zero.delta_kappa.abs() < 1e-12);
    }

    #[test]
    fn tangent_curvature_of_a_quadratic_like_law() {
        // one task, A = e_0 - e_1: curvature along (1,-1)/sqrt2 is 2 e^{A.p}
        let obj = LogLinearObjective::uniform(vec![0.0], vec![vec![1.0, -1.0]]);
        let p = [0.5, 0.5];
        assert!((tangent_min_eigenvalue(&obj, &p) - 2.0).abs() < 1e-12);
        let z = tangent_basis(4);
        let g = z.transpose() * &z;
        assert!((g - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn gap_report_examples() {
        let d = DomainSet::from_pairs(&[("a", 1), ("b", 1), ("c", 1)]).unwrap();
        let g = truth(vec![vec![0.4, -0.3, 0.2], vec![-0.2, 0.1, 0.5]], d.ids());
        let full = truth_optimum(&g, None, 0.0, &Mixture::uniform(3)).unwrap().mixture;
        let plan = ReusePlan::new(d, vec!["a".into(), "b".into()], Mixture::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let rep = gap_report(&g, &plan, &full, &full).unwrap();
        assert_eq!(rep.performance_gap, 0.0);
        let want = euclid(&[0.5, 0.5], &normalized(&full.weights()[..2]).unwrap());
        assert!((rep.reuse_gap - want).abs() < 1e-15);
        assert!((rep.rho_star + rep.one_minus_rho - 1.0).abs() < 1e-15);
    }

    #[test]
    fn theorem1_exact_reuse_has_zero_bound() {
        let d = DomainSet::from_pairs(&[("a", 1), ("b", 2), ("c", 1), ("e", 1)]).unwrap();
        let g = truth(
            vec![vec![0.4, -0.3, 0.2, 0.1], vec![-0.2, 0.1, 0.5, -0.4], vec![0.3, 0.3, -0.6, 0.2], vec![0.1, -0.5, 0.1, 0.3]],
            d.ids(),
        );
        let full = truth_optimum(&g, None, 0.0, &Mixture::uniform(4)).unwrap().mixture;
        let ratios = normalized(&full.weights()[..2]).unwrap();
        let plan = ReusePlan::new(d, vec!["a".into(), "b".into()], Mixture::new(ratios).unwrap()).unwrap();
        let rep = theorem1_constant(&g, &plan, None, None, 1).unwrap();
        assert!(rep.reuse_gap < 1e-6, "{}", rep.reuse_gap);
        assert!(rep.performance_gap.abs() < 1e-9);
        assert!(rep.holds);
    }

    #[test]
    fn theorem1_decoupled_truth() {
        // reused domains carry no slope: alpha_fix = 0 so the constant vanishes
        let d = DomainSet::from_pairs(&[("a", 1), ("b", 1), ("c", 1), ("e", 1)]).unwrap();
        let g = truth(
            vec![vec![0.0, 0.0, 0.5, -0.2], vec![0.0, 0.0, -0.3, 0.4], vec![0.0, 0.0, 0.2, 0.2]],
            d.ids(),
        );
        let plan = ReusePlan::new(d, vec!["a".into(), "b".into()], Mixture::new(vec![0.9, 0.1]).unwrap()).unwrap();
        let rep = theorem1_constant(&g, &plan, None, Some(1.0), 1).unwrap();
        assert_eq!(rep.constant, 0.0);
        assert!(rep.performance_gap <= 1e-9);
        assert!(rep.holds);
        assert!(matches!(theorem1_constant(&g, &plan, None, Some(0.0), 1), Err(MixError::NonPositiveMu(_))));
    }

    #[test]
    fn theorem2_tight_caps_force_rho_one() {
        let pre = DomainSet::from_pairs(&[("a", 1000), ("b", 1000)]).unwrap();
        // the added domain has no tokens, so its cap is zero
        let add = DomainUpdate::add(vec![Domain::new("n", 0)]);
        let g = truth(vec![vec![0.3, -0.2, -1.0], vec![-0.1, 0.4, -0.5]], vec!["a".into(), "b".into(), "n".into()]);
        let budget = RepetitionBudget::new(1.0, 1000).unwrap();
        let rep = theorem2_bound(&g, &pre, &add, Some(&budget), None, 3).unwrap();
        assert!(rep.one_minus_rho < 1e-8);
        assert!(rep.reuse_gap < 1e-3);
        assert!(rep.holds);
        assert!(matches!(
            theorem2_bound(&g, &pre, &DomainUpdate::remove(["a"]), None, None, 3),
            Err(MixError::WrongUpdateKind(_))
        ));
    }

    #[test]
    fn theorem2_low_utility_add() {
        let pre = DomainSet::from_pairs(&[("a", 1), ("b", 1), ("c", 1)]).unwrap();
        let add = DomainUpdate::add(vec![Domain::new("n", 1)]);
        let g = truth(
            vec![vec![0.3, -0.2, 0.1, 0.0], vec![-0.1, 0.4, -0.3, 0.0], vec![0.2, 0.2, -0.5, 0.0]],
            vec!["a".into(), "b".into(), "c".into(), "n".into()],
        );
        let rep = theorem2_bound(&g, &pre, &add, None, None, 3).unwrap();
        assert!(rep.holds, "{rep:?}");
    }

    #[test]
    fn weak_mix_is_worse_than_optimum() {
        let g = truth(vec![vec![0.4, -0.3, 0.2], vec![-0.2, 0.1, 0.5]], ids("d", 3));
        let w = weak_mix(&g, &ids("d", 3), None).unwrap();
        let best = truth_optimum(&g, None, 0.0, &Mixture::uniform(3)).unwrap().mixture;
        assert!(truth_loss(&g, w.weights()) > truth_loss(&g, best.weights()));
    }

    fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, m).prop_filter_map("mass", |v| normalized(&v))
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(a in simplex(5), b in simplex(5), c in simplex(5)) {
            let ab = tv_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            prop_assert_eq!(ab, tv_distance(&b, &a).unwrap());
            prop_assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
            prop_assert!(tv_distance(&a, &c).unwrap() <= ab + tv_distance(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn kappa_shrinks_with_alpha_fix(
            f in prop::collection::vec(0.01f64..3.0, 1..6),
            c in prop::collection::vec(0.0f64..3.0, 6),
            t in 0.01f64..0.99,
        ) {
            let c = &c[..f.len()];
            let k = kappa_from_norms(&f, c);
            let scaled: Vec<f64> = f.iter().map(|x| x * t).collect();
            prop_assert!(k >= 0.0);
            prop_assert!(kappa_from_norms(&scaled, c) < k);
        }
    }
}
