//! Mixture solvers over the capped simplex: projected gradient descent and
//! adaptive Dirichlet search, both with optional KL regularization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{caps_feasible, Mixture};
use crate::error::{MixError, Result};
use crate::rng::{streams, substream};
use crate::swarm::{dirichlet_alpha, dirichlet_draw};

/// A differentiable function of a mixture.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, p: &[f64]) -> f64;
    fn gradient(&self, p: &[f64], out: &mut [f64]);
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, p: &[f64]) -> f64 {
        (**self).value(p)
    }
    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        (**self).gradient(p, out)
    }
}

impl<T: Objective + ?Sized> Objective for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, p: &[f64]) -> f64 {
        (**self).value(p)
    }
    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        (**self).gradient(p, out)
    }
}

/// `-f`, for maximizing with a minimizer.
pub struct Negated<O>(pub O);

impl<O: Objective> Objective for Negated<O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn value(&self, p: &[f64]) -> f64 {
        -self.0.value(p)
    }
    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        self.0.gradient(p, out);
        out.iter_mut().for_each(|g| *g = -*g);
    }
}

/// A constant objective; handy for KL-only problems.
pub struct Constant {
    pub dim: usize,
    pub value: f64,
}

impl Objective for Constant {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _: &[f64]) -> f64 {
        self.value
    }
    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SolverKind {
    Exact { tol: f64, max_iters: usize },
    Search { candidates: usize, rounds: usize, seed: u64 },
}

impl SolverKind {
    pub fn exact() -> Self {
        SolverKind::Exact {
            tol: 1e-8,
            max_iters: 50_000,
        }
    }

    pub fn search(seed: u64) -> Self {
        SolverKind::Search {
            candidates: 512,
            rounds: 3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSpec {
    pub lambda: f64,
    pub p0: Mixture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<f64>>,
    pub solver: SolverKind,
}

impl SolveSpec {
    pub fn new(lambda: f64, p0: Mixture, caps: Option<Vec<f64>>, solver: SolverKind) -> Self {
        Self {
            lambda,
            p0,
            caps,
            solver,
        }
    }

    /// Caps after folding in `p0` zeros (forced to zero when `lambda > 0`).
    pub fn effective_caps(&self, m: usize) -> Result<Vec<f64>> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MixError::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.p0.len() != m {
            return Err(MixError::DimensionMismatch {
                expected: m,
                got: self.p0.len(),
            });
        }
        let mut caps = match &self.caps {
            Some(c) if c.len() != m => {
                return Err(MixError::DimensionMismatch {
                    expected: m,
                    got: c.len(),
                })
            }
            Some(c) => c.iter().map(|&u| u.clamp(0.0, 1.0)).collect(),
            None => vec![1.0; m],
        };
        if self.lambda > 0.0 {
            for (u, &q) in caps.iter_mut().zip(self.p0.weights()) {
                if q == 0.0 {
                    *u = 0.0;
                }
            }
        }
        if !caps_feasible(&caps) {
            return Err(MixError::InfeasibleCaps {
                sum: caps.iter().sum(),
            });
        }
        Ok(caps)
    }

    /// Surrogate plus `lambda * KL(p || p0)`.
    pub fn total_value<O: Objective + ?Sized>(&self, obj: &O, p: &[f64]) -> f64 {
        let f = obj.value(p);
        if self.lambda > 0.0 {
            f + self.lambda * kl_divergence(p, self.p0.weights())
        } else {
            f
        }
    }
}

/// `KL(p || q)` with `0 log(0 / x) = 0`; infinite when `p` has mass where `q` does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a <= 0.0 {
                0.0
            } else if b <= 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub solver: String,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
    /// Infinity norm of the unit-step projected-gradient mapping at the result.
    pub projected_gradient_norm: f64,
    /// Indices whose cap binds at the result.
    pub active_caps: Vec<usize>,
    pub candidates_evaluated: usize,
    pub feasible_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub mixture: Mixture,
    /// Surrogate plus KL penalty at the result.
    pub value: f64,
    pub surrogate_value: f64,
    pub kl: f64,
    pub diagnostics: SolveDiagnostics,
}

/// Dispatches on `spec.solver`.
pub fn solve<O: Objective + ?Sized>(obj: &O, spec: &SolveSpec) -> Result<SolveOutcome> {
    match spec.solver {
        SolverKind::Exact { .. } => solve_exact(obj, spec),
        SolverKind::Search { .. } => solve_search(obj, spec),
    }
}

/// Euclidean projection onto `{p : sum p = 1, 0 <= p <= caps}`.
pub fn project_capped_simplex(v: &[f64], caps: &[f64]) -> Result<Vec<f64>> {
    if v.len() != caps.len() {
        return Err(MixError::DimensionMismatch {
            expected: caps.len(),
            got: v.len(),
        });
    }
    let caps: Vec<f64> = caps.iter().map(|&u| u.max(0.0)).collect();
    let total: f64 = caps.iter().sum();
    if total < 1.0 - 1e-12 || v.is_empty() {
        return Err(MixError::InfeasibleCaps { sum: total });
    }
    if total <= 1.0 + 1e-15 {
        return Ok(caps);
    }
    let mass = |tau: f64| -> f64 {
        v.iter()
            .zip(&caps)
            .map(|(&x, &u)| (x - tau).clamp(0.0, u))
            .sum()
    };
    // mass is nonincreasing in tau: >= 1 at lo, 0 at hi.
    let mut lo = v
        .iter()
        .zip(&caps)
        .map(|(&x, &u)| x - u)
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut tau = 0.5 * (lo + hi);

    // Solve exactly on the free set implied by the bisection bracket.
    let (mut free_sum, mut free_n, mut upper) = (0.0, 0usize, 0.0);
    for (&x, &u) in v.iter().zip(&caps) {
        let y = x - tau;
        if y >= u {
            upper += u;
        } else if y > 0.0 {
            free_sum += x;
            free_n += 1;
        }
    }
    if free_n > 0 {
        let exact = (free_sum + upper - 1.0) / free_n as f64;
        let consistent = v.iter().zip(&caps).all(|(&x, &u)| {
            let before = x - tau;
            let after = x - exact;
            let class = |y: f64| {
                if y >= u {
                    2
                } else if y > 0.0 {
                    1
                } else {
                    0
                }
            };
            class(before) == class(after)
        });
        if consistent {
            tau = exact;
        }
    }
    let mut p: Vec<f64> = v
        .iter()
        .zip(&caps)
        .map(|(&x, &u)| (x - tau).clamp(0.0, u))
        .collect();
    // Push any leftover rounding onto a coordinate with room.
    let residual = 1.0 - p.iter().sum::<f64>();
    if residual != 0.0 {
        if let Some(j) = (0..p.len()).find(|&j| {
            let room = if residual > 0.0 { caps[j] - p[j] } else { p[j] };
            room >= residual.abs() && p[j] > 0.0
        }) {
            p[j] += residual;
        }
    }
    Ok(p)
}

fn active_caps(p: &[f64], caps: &[f64]) -> Vec<usize> {
    p.iter()
        .zip(caps)
        .enumerate()
        .filter(|(_, (&x, &u))| u < 1.0 && x >= u - 1e-12)
        .map(|(j, _)| j)
        .collect()
}

/// Solves `w + ln w = z` for `w > 0`.
fn omega(z: f64) -> f64 {
    if z < -745.0 {
        return 0.0;
    }
    // Newton on u = ln w: e^u + u - z = 0 is convex and increasing.
    let mut u = if z < 1.0 { z } else { z.ln() };
    for _ in 0..100 {
        let e = u.exp();
        let step = (e + u - z) / (e + 1.0);
        u -= step;
        if step.abs() <= 1e-15 * u.abs().max(1.0) {
            break;
        }
    }
    u.exp()
}

/// `argmin_p |p - v|^2 / (2t) + lambda KL(p || p0)` over the capped simplex.
/// Reduces to the Euclidean projection when `lambda = 0`.
pub fn kl_prox(v: &[f64], t: f64, lambda: f64, p0: &[f64], caps: &[f64]) -> Result<Vec<f64>> {
    if lambda == 0.0 {
        return project_capped_simplex(v, caps);
    }
    let tl = t * lambda;
    let coord = |j: usize, tau: f64| -> f64 {
        if caps[j] <= 0.0 || p0[j] <= 0.0 {
            return 0.0;
        }
        let z = (v[j] - t * tau) / tl + p0[j].ln() - 1.0 - tl.ln();
        (tl * omega(z)).min(caps[j])
    };
    let mass = |tau: f64| -> f64 { (0..v.len()).map(|j| coord(j, tau)).sum() };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while mass(lo) < 1.0 {
        lo = lo * 2.0 - 1.0;
        if lo < -1e300 {
            return Err(MixError::InfeasibleCaps { sum: caps.iter().sum() });
        }
    }
    while mass(hi) > 1.0 {
        hi = hi * 2.0 + 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut p: Vec<f64> = (0..v.len()).map(|j| coord(j, 0.5 * (lo + hi))).collect();
    let residual = 1.0 - p.iter().sum::<f64>();
    if let Some(j) = (0..p.len())
        .filter(|&j| p[j] > 0.0 && p[j] + residual <= caps[j] && p[j] + residual >= 0.0)
        .max_by(|&a, &b| p[a].total_cmp(&p[b]))
    {
        p[j] += residual;
    }
    Ok(p)
}

struct Problem<'a, O: ?Sized> {
    obj: &'a O,
    lambda: f64,
    p0: &'a [f64],
    caps: &'a [f64],
}

impl<O: Objective + ?Sized> Problem<'_, O> {
    fn total(&self, p: &[f64]) -> f64 {
        let f = self.obj.value(p);
        if self.lambda > 0.0 {
            f + self.lambda * kl_divergence(p, self.p0)
        } else {
            f
        }
    }

    fn prox(&self, v: &[f64], t: f64) -> Result<Vec<f64>> {
        kl_prox(v, t, self.lambda, self.p0, self.caps)
    }

    /// Infinity norm of `x - prox_1(x - grad f(x))`; zero exactly at the optimum.
    fn mapping_norm(&self, x: &[f64], g: &[f64]) -> Result<f64> {
        let v: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
        let y = self.prox(&v, 1.0)?;
        Ok(x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

/// Consecutive failed line searches before giving up.
pub const STALL_LIMIT: usize = 100;

/// Window of past values the sufficient-decrease test compares against.
const NONMONOTONE_WINDOW: usize = 10;

/// Projected gradient descent with Barzilai-Borwein steps and nonmonotone
/// Armijo backtracking. The KL term, when present, is folded into the
/// projection step so weights near zero do not make the problem stiff.
pub fn solve_exact<O: Objective + ?Sized>(obj: &O, spec: &SolveSpec) -> Result<SolveOutcome> {
    let m = obj.dim();
    let caps = spec.effective_caps(m)?;
    let (tol, max_iters) = match spec.solver {
        SolverKind::Exact { tol, max_iters } => (tol, max_iters),
        SolverKind::Search { .. } => (1e-8, 50_000),
    };
    let pr = Problem {
        obj,
        lambda: spec.lambda,
        p0: spec.p0.weights(),
        caps: &caps,
    };

    let mut x = project_capped_simplex(spec.p0.weights(), &caps)?;
    let mut fx = pr.total(&x);
    let mut g = vec![0.0; m];
    obj.gradient(&x, &mut g);
    let mut history = std::collections::VecDeque::from([fx]);
    let mut step = 1.0;
    let mut failures = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut stalled = false;
    let mut pg = pr.mapping_norm(&x, &g)?;

    while iterations < max_iters {
        if pg < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 8.0 * f64::EPSILON * reference.abs();
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let v: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            let y = pr.prox(&v, t)?;
            let dist2: f64 = y.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2 == 0.0 {
                break;
            }
            let fy = pr.total(&y);
            if fy.is_finite() && fy <= reference - 1e-4 * dist2 / (2.0 * t) + slack {
                accepted = Some((y, fy));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((y, fy)) => {
                failures = 0;
                let mut gy = vec![0.0; m];
                obj.gradient(&y, &mut gy);
                let (mut ss, mut sy) = (0.0, 0.0);
                for j in 0..m {
                    let s = y[j] - x[j];
                    ss += s * s;
                    sy += s * (gy[j] - g[j]);
                }
                step = if sy > 0.0 {
                    (ss / sy).clamp(1e-12, 1e12)
                } else {
                    (t * 4.0).min(1e12)
                };
                x = y;
                fx = fy;
                g = gy;
                history.push_back(fx);
                if history.len() > NONMONOTONE_WINDOW {
                    history.pop_front();
                }
                pg = pr.mapping_norm(&x, &g)?;
            }
            None => {
                failures += 1;
                history.clear();
                history.push_back(fx);
                step = 1.0;
                if failures >= STALL_LIMIT {
                    stalled = true;
                    break;
                }
            }
        }
    }
    if !converged && pg < tol {
        converged = true;
    }
    let surrogate_value = obj.value(&x);
    let kl = kl_divergence(&x, spec.p0.weights());
    let active = active_caps(&x, &caps);
    Ok(SolveOutcome {
        mixture: Mixture::new(x)?,
        value: fx,
        surrogate_value,
        kl,
        diagnostics: SolveDiagnostics {
            solver: "exact".into(),
            iterations,
            converged,
            stalled,
            projected_gradient_norm: pg,
            active_caps: active,
            candidates_evaluated: 0,
            feasible_candidates: 0,
        },
    })
}

/// Concentration (total Dirichlet mass) of the first search round.
pub const SEARCH_FIRST_CONCENTRATION: f64 = 50.0;
/// Concentration of later rounds, centered on the incumbent.
pub const SEARCH_LATER_CONCENTRATION: f64 = 200.0;

/// Multi-round Dirichlet search; each round after the first is centered on the best mix so far.
pub fn solve_search<O: Objective + ?Sized>(obj: &O, spec: &SolveSpec) -> Result<SolveOutcome> {
    let m = obj.dim();
    let caps = spec.effective_caps(m)?;
    let (n, rounds, seed) = match spec.solver {
        SolverKind::Search {
            candidates,
            rounds,
            seed,
        } => (candidates, rounds, seed),
        SolverKind::Exact { .. } => (512, 3, 0),
    };
    if n == 0 || rounds == 0 {
        return Err(MixError::InvalidConfig("search needs at least one candidate".into()));
    }
    let mut prior = spec.p0.weights().to_vec();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evaluated = 0usize;
    let mut feasible = 0usize;
    for round in 0..rounds {
        let conc = if round == 0 {
            SEARCH_FIRST_CONCENTRATION
        } else {
            SEARCH_LATER_CONCENTRATION
        };
        let alpha = dirichlet_alpha(&prior, conc);
        let scored: Vec<Option<(Vec<f64>, f64)>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut rng = substream(seed, streams::SEARCH, (round * n + k) as u64);
                let mut w = dirichlet_draw(&mut rng, &alpha);
                for (x, &u) in w.iter_mut().zip(&caps) {
                    if u == 0.0 {
                        *x = 0.0;
                    }
                }
                let s: f64 = w.iter().sum();
                if s <= 0.0 {
                    return None;
                }
                w.iter_mut().for_each(|x| *x /= s);
                if w.iter().zip(&caps).any(|(x, u)| *x > u + 1e-12) {
                    return None;
                }
                let v = spec.total_value(obj, &w);
                v.is_finite().then_some((w, v))
            })
            .collect();
        evaluated += n;
        for (w, v) in scored.into_iter().flatten() {
            feasible += 1;
            // strict comparison keeps the earliest candidate on ties
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((w, v));
            }
        }
        if let Some((w, _)) = &best {
            prior = w.clone();
        }
    }
    let (x, value) = best.ok_or(MixError::NoFeasibleCandidate)?;
    let surrogate_value = obj.value(&x);
    let kl = kl_divergence(&x, spec.p0.weights());
    let mut g = vec![0.0; m];
    obj.gradient(&x, &mut g);
    let pg = Problem {
        obj,
        lambda: spec.lambda,
        p0: spec.p0.weights(),
        caps: &caps,
    }
    .mapping_norm(&x, &g)?;
    let active = active_caps(&x, &caps);
    Ok(SolveOutcome {
        mixture: Mixture::new(x)?,
        value,
        surrogate_value,
        kl,
        diagnostics: SolveDiagnostics {
            solver: "search".into(),
            iterations: rounds,
            converged: true,
            stalled: false,
            projected_gradient_norm: pg,
            active_caps: active,
            candidates_evaluated: evaluated,
            feasible_candidates: feasible,
        },
    })
}
