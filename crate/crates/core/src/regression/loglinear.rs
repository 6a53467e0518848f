//! The log-linear mixing law `f(p) = c + exp(A . p)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::lm::{levenberg_marquardt, LmResult, Residuals};
use super::{check_records, FitConfig, FitDiagnostics};
use crate::error::Result;
use crate::optimize::Objective;
use crate::rng::{streams, substream};

/// `sum_i w_i (c_i + exp(A_i . p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearObjective {
    pub offsets: Vec<f64>,
    pub slopes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl LogLinearObjective {
    pub fn uniform(offsets: Vec<f64>, slopes: Vec<Vec<f64>>) -> Self {
        let n = offsets.len();
        Self {
            offsets,
            slopes,
            weights: vec![1.0 / n as f64; n],
        }
    }

    fn exps(&self, p: &[f64]) -> Vec<f64> {
        self.slopes
            .iter()
            .map(|a| a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>().exp())
            .collect()
    }

    /// The objective without its constant offsets.
    pub fn fbar(&self, p: &[f64]) -> f64 {
        self.exps(p).iter().zip(&self.weights).map(|(e, w)| e * w).sum()
    }

    pub fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        let m = self.dim();
        let mut h = DMatrix::zeros(m, m);
        for ((a, e), w) in self.slopes.iter().zip(self.exps(p)).zip(&self.weights) {
            let v = DVector::from_column_slice(a);
            h += (w * e) * &v * v.transpose();
        }
        h
    }
}

impl Objective for LogLinearObjective {
    fn dim(&self) -> usize {
        self.slopes.first().map_or(0, Vec::len)
    }

    fn value(&self, p: &[f64]) -> f64 {
        self.exps(p)
            .iter()
            .zip(&self.offsets)
            .zip(&self.weights)
            .map(|((e, c), w)| w * (c + e))
            .sum()
    }

    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for ((a, e), w) in self.slopes.iter().zip(self.exps(p)).zip(&self.weights) {
            for (g, x) in out.iter_mut().zip(a) {
                *g += w * e * x;
            }
        }
    }
}

/// `theta = [ln c, A]`
struct Problem<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [f64],
}

impl Residuals for Problem<'_> {
    fn n_params(&self) -> usize {
        self.xs[0].len() + 1
    }

    fn residuals(&self, t: &[f64]) -> DVector<f64> {
        let c = t[0].exp();
        DVector::from_iterator(
            self.ys.len(),
            self.xs.iter().zip(self.ys).map(|(x, y)| {
                c + t[1..].iter().zip(x).map(|(a, p)| a * p).sum::<f64>().exp() - y
            }),
        )
    }

    fn jacobian(&self, t: &[f64]) -> DMatrix<f64> {
        let c = t[0].exp();
        let m = self.xs[0].len();
        let mut j = DMatrix::zeros(self.ys.len(), m + 1);
        for (r, x) in self.xs.iter().enumerate() {
            let e = t[1..].iter().zip(x).map(|(a, p)| a * p).sum::<f64>().exp();
            j[(r, 0)] = c;
            for k in 0..m {
                j[(r, k + 1)] = e * x[k];
            }
        }
        j
    }
}

/// Least squares of `z` on `xs` (no intercept; the simplex already spans one).
fn ols(xs: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let m = xs[0].len();
    let x = DMatrix::from_fn(xs.len(), m, |r, k| xs[r][k]);
    let zv = DVector::from_column_slice(z);
    let svd = x.svd(true, true);
    match svd.solve(&zv, 1e-12) {
        Ok(a) => a.as_slice().to_vec(),
        Err(_) => vec![0.0; m],
    }
}

fn initial(xs: &[Vec<f64>], ys: &[f64], shrink: f64) -> Vec<f64> {
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let c0 = (shrink * ymin).max(1e-6);
    let z: Vec<f64> = ys.iter().map(|y| (y - c0).max(1e-12).ln()).collect();
    let mut t = vec![c0.ln()];
    t.extend(ols(xs, &z));
    t
}

/// Returns `(c, A, diagnostics)`.
pub(super) fn fit(xs: &[Vec<f64>], ys: &[f64], cfg: &FitConfig) -> Result<(f64, Vec<f64>, FitDiagnostics)> {
    let m = xs[0].len();
    check_records(xs.len(), m + 1)?;
    let problem = Problem { xs, ys };
    let mut best: Option<LmResult> = None;
    let mut any_converged = false;
    let mut iterations = 0;
    for restart in 0..cfg.restarts.max(1) {
        let theta0 = if restart == 0 {
            initial(xs, ys, 0.9)
        } else {
            let mut rng = substream(cfg.seed, streams::FIT, restart as u64);
            let mut t = initial(xs, ys, rng.random_range(0.05..0.99));
            for a in t[1..].iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += 0.5 * z;
            }
            t
        };
        let out = levenberg_marquardt(&problem, &theta0, cfg.lm());
        any_converged |= out.converged;
        iterations += out.iterations;
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    let best = best.expect("at least one restart");
    let diag = FitDiagnostics::from_cost(best.cost, ys.len(), cfg.restarts.max(1), any_converged, iterations);
    Ok((best.theta[0].exp(), best.theta[1..].to_vec(), diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_matches_finite_differences() {
        let xs = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]];
        let ys = vec![0.0, 0.0];
        let p = Problem { xs: &xs, ys: &ys };
        let t = [-0.3, 0.4, -1.2, 0.8];
        let j = p.jacobian(&t);
        for k in 0..4 {
            let h = 1e-6;
            let mut tp = t;
            let mut tm = t;
            tp[k] += h;
            tm[k] -= h;
            let fd = (p.residuals(&tp) - p.residuals(&tm)) / (2.0 * h);
            for i in 0..2 {
                assert!((fd[i] - j[(i, k)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn objective_gradient_and_hessian_match_finite_differences() {
        let obj = LogLinearObjective {
            offsets: vec![0.3, 0.7],
            slopes: vec![vec![0.5, -1.0, 0.2], vec![-0.3, 0.9, 1.1]],
            weights: vec![0.25, 0.75],
        };
        let p = [0.2, 0.5, 0.3];
        let mut g = [0.0; 3];
        obj.gradient(&p, &mut g);
        let h = obj.hessian(&p);
        for k in 0..3 {
            let e = 1e-6;
            let mut pp = p;
            let mut pm = p;
            pp[k] += e;
            pm[k] -= e;
            let fd = (obj.value(&pp) - obj.value(&pm)) / (2.0 * e);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0));
            let mut gp = [0.0; 3];
            let mut gm = [0.0; 3];
            obj.gradient(&pp, &mut gp);
            obj.gradient(&pm, &mut gm);
            for r in 0..3 {
                let fd = (gp[r] - gm[r]) / (2.0 * e);
                assert!((fd - h[(r, k)]).abs() < 1e-6);
            }
        }
    }
}
