//! Power-law families: `sum_j A_j p_j^-alpha_j` and
//! `c + sum_j (R (A_j + p_j))^-alpha_j`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::lm::{levenberg_marquardt, LmResult, Residuals};
use super::{check_records, FitConfig, FitDiagnostics};
use crate::error::Result;
use crate::rng::{streams, substream};

/// Weights below this are floored before taking negative powers.
pub const BIMIX_FLOOR: f64 = 1e-6;
const AUTOSCALE_FLOOR: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

pub fn bimix_value(a: &[f64], alpha: &[f64], p: &[f64]) -> f64 {
    a.iter()
        .zip(alpha)
        .zip(p)
        .map(|((a, al), x)| a * x.max(BIMIX_FLOOR).powf(-al))
        .sum()
}

pub fn bimix_gradient(a: &[f64], alpha: &[f64], p: &[f64], out: &mut [f64]) {
    for (j, g) in out.iter_mut().enumerate() {
        let x = p[j].max(BIMIX_FLOOR);
        *g = -alpha[j] * a[j] * x.powf(-alpha[j] - 1.0);
    }
}

pub fn autoscale_value(c: f64, a: &[f64], alpha: &[f64], r: f64, p: &[f64]) -> f64 {
    c + a
        .iter()
        .zip(alpha)
        .zip(p)
        .map(|((a, al), x)| (r * (a + x).max(AUTOSCALE_FLOOR)).powf(-al))
        .sum::<f64>()
}

pub fn autoscale_gradient(a: &[f64], alpha: &[f64], r: f64, p: &[f64], out: &mut [f64]) {
    for (j, g) in out.iter_mut().enumerate() {
        let s = (a[j] + p[j]).max(AUTOSCALE_FLOOR);
        *g = -alpha[j] * (r * s).powf(-alpha[j]) / s;
    }
}

/// `theta = [ln A, ln alpha]`
struct BiMix<'a> {
    logs: Vec<Vec<f64>>,
    ys: &'a [f64],
}

impl Residuals for BiMix<'_> {
    fn n_params(&self) -> usize {
        2 * self.logs[0].len()
    }

    fn residuals(&self, t: &[f64]) -> DVector<f64> {
        let m = self.logs[0].len();
        DVector::from_iterator(
            self.ys.len(),
            self.logs.iter().zip(self.ys).map(|(lp, y)| {
                (0..m).map(|j| (t[j] - t[m + j].exp() * lp[j]).exp()).sum::<f64>() - y
            }),
        )
    }

    fn jacobian(&self, t: &[f64]) -> DMatrix<f64> {
        let m = self.logs[0].len();
        let mut jac = DMatrix::zeros(self.ys.len(), 2 * m);
        for (r, lp) in self.logs.iter().enumerate() {
            for j in 0..m {
                let al = t[m + j].exp();
                let term = (t[j] - al * lp[j]).exp();
                jac[(r, j)] = term;
                jac[(r, m + j)] = -term * lp[j] * al;
            }
        }
        jac
    }
}

/// Returns `(A, alpha, diagnostics)`. Zero weights are floored with a warning.
pub(super) fn fit_bimix(xs: &[Vec<f64>], ys: &[f64], cfg: &FitConfig) -> Result<(Vec<f64>, Vec<f64>, FitDiagnostics)> {
    let m = xs[0].len();
    check_records(xs.len(), m + 1)?;
    let floored = xs.iter().flatten().filter(|&&x| x < BIMIX_FLOOR).count();
    let logs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().map(|v| v.max(BIMIX_FLOOR).ln()).collect())
        .collect();
    let problem = BiMix { logs, ys };
    let ymean = ys.iter().sum::<f64>() / ys.len() as f64;
    let scale = (ymean.abs().max(1e-6) / m as f64).ln();
    let best = multistart(&problem, cfg, |restart, rng| {
        let mut t = vec![scale; m];
        t.extend(vec![0.1f64.ln(); m]);
        if restart > 0 {
            for v in t.iter_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        t
    });
    let mut diag = FitDiagnostics::from_cost(best.0.cost, ys.len(), cfg.restarts.max(1), best.1, best.2);
    if floored > 0 {
        diag.warnings.push(format!(
            "{floored} zero mixture weights floored at {BIMIX_FLOOR} for the power law"
        ));
    }
    let a = best.0.theta[..m].iter().map(|v| v.exp()).collect();
    let alpha = best.0.theta[m..].iter().map(|v| v.exp()).collect();
    Ok((a, alpha, diag))
}

/// `theta = [ln c, logit A, ln alpha]`
struct AutoScale<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [f64],
    r: f64,
}

impl Residuals for AutoScale<'_> {
    fn n_params(&self) -> usize {
        1 + 2 * self.xs[0].len()
    }

    fn residuals(&self, t: &[f64]) -> DVector<f64> {
        let m = self.xs[0].len();
        let a: Vec<f64> = t[1..=m].iter().map(|v| sigmoid(*v)).collect();
        let al: Vec<f64> = t[m + 1..].iter().map(|v| v.exp()).collect();
        DVector::from_iterator(
            self.ys.len(),
            self.xs
                .iter()
                .zip(self.ys)
                .map(|(x, y)| autoscale_value(t[0].exp(), &a, &al, self.r, x) - y),
        )
    }

    fn jacobian(&self, t: &[f64]) -> DMatrix<f64> {
        let m = self.xs[0].len();
        let mut jac = DMatrix::zeros(self.ys.len(), 1 + 2 * m);
        let c = t[0].exp();
        for (row, x) in self.xs.iter().enumerate() {
            jac[(row, 0)] = c;
            for j in 0..m {
                let a = sigmoid(t[1 + j]);
                let al = t[1 + m + j].exp();
                let raw = a + x[j];
                let s = raw.max(AUTOSCALE_FLOOR);
                let term = (self.r * s).powf(-al);
                let ds = if raw > AUTOSCALE_FLOOR { 1.0 } else { 0.0 };
                jac[(row, 1 + j)] = -al * term / s * ds * a * (1.0 - a);
                jac[(row, 1 + m + j)] = -(self.r * s).ln() * al * term;
            }
        }
        jac
    }
}

/// Returns `(c, A, alpha, diagnostics)`.
pub(super) fn fit_autoscale(
    xs: &[Vec<f64>],
    ys: &[f64],
    r: f64,
    cfg: &FitConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>, FitDiagnostics)> {
    let m = xs[0].len();
    check_records(xs.len(), m + 1)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(crate::error::MixError::InvalidConfig("AutoScale needs a positive R".into()));
    }
    let problem = AutoScale { xs, ys, r };
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let best = multistart(&problem, cfg, |restart, rng| {
        let mut t = vec![(0.5 * ymin).max(1e-6).ln()];
        t.extend(vec![logit(0.1); m]);
        t.extend(vec![0.5f64.ln(); m]);
        if restart > 0 {
            t[0] = (rng.random_range(0.05..0.95) * ymin).max(1e-6).ln();
            for v in t[1..].iter_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        t
    });
    let diag = FitDiagnostics::from_cost(best.0.cost, ys.len(), cfg.restarts.max(1), best.1, best.2);
    let th = &best.0.theta;
    Ok((
        th[0].exp(),
        th[1..=m].iter().map(|v| sigmoid(*v)).collect(),
        th[m + 1..].iter().map(|v| v.exp()).collect(),
        diag,
    ))
}

fn multistart<P: Residuals>(
    problem: &P,
    cfg: &FitConfig,
    init: impl Fn(usize, &mut rand_chacha::ChaCha8Rng) -> Vec<f64>,
) -> (LmResult, bool, usize) {
    let mut best: Option<LmResult> = None;
    let mut any = false;
    let mut iters = 0;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = substream(cfg.seed, streams::FIT, restart as u64);
        let out = levenberg_marquardt(problem, &init(restart, &mut rng), cfg.lm());
        any |= out.converged;
        iters += out.iterations;
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    (best.expect("at least one restart"), any, iters)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_jacobian<P: Residuals>(p: &P, t: &[f64]) {
        let j = p.jacobian(t);
        for k in 0..t.len() {
            let h = 1e-6;
            let mut tp = t.to_vec();
            let mut tm = t.to_vec();
            tp[k] += h;
            tm[k] -= h;
            let fd = (p.residuals(&tp) - p.residuals(&tm)) / (2.0 * h);
            for i in 0..fd.len() {
                let tol = 1e-6 * j[(i, k)].abs().max(1.0);
                assert!((fd[i] - j[(i, k)]).abs() < tol, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let xs = vec![vec![0.3, 0.7], vec![0.6, 0.4], vec![0.1, 0.9]];
        let ys = vec![0.0; 3];
        let logs = xs.iter().map(|x| x.iter().map(|v: &f64| v.ln()).collect()).collect();
        check_jacobian(&BiMix { logs, ys: &ys }, &[0.1, -0.4, -1.0, 0.2]);
        check_jacobian(&AutoScale { xs: &xs, ys: &ys, r: 3.0 }, &[-0.5, 0.3, -1.1, 0.2, -0.7]);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let (a, al) = (vec![0.4, 1.3, 0.2], vec![0.3, 0.8, 1.5]);
        let p = [0.2, 0.5, 0.3];
        let mut g = [0.0; 3];
        bimix_gradient(&a, &al, &p, &mut g);
        let mut g2 = [0.0; 3];
        autoscale_gradient(&a, &al, 2.0, &p, &mut g2);
        for k in 0..3 {
            let h = 1e-7;
            let mut pp = p;
            let mut pm = p;
            pp[k] += h;
            pm[k] -= h;
            let fd = (bimix_value(&a, &al, &pp) - bimix_value(&a, &al, &pm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0));
            let fd = (autoscale_value(0.1, &a, &al, 2.0, &pp) - autoscale_value(0.1, &a, &al, 2.0, &pm)) / (2.0 * h);
            assert!((fd - g2[k]).abs() < 1e-5 * g2[k].abs().max(1.0));
        }
    }
}
