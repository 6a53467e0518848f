//! Exact Gaussian-process regression with a scaled RBF kernel and a constant
//! mean equal to the training average.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MixError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpGrid {
    pub lengthscales: Vec<f64>,
    pub signal_variances: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

impl Default for GpGrid {
    fn default() -> Self {
        Self {
            lengthscales: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            signal_variances: vec![0.01, 0.1, 1.0],
            noise_variances: vec![1e-6, 1e-4, 1e-2],
        }
    }
}

const JITTER: f64 = 1e-8;
const JITTER_TRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub mean: f64,
    pub train_x: Vec<Vec<f64>>,
    /// `K^-1 (y - mean)`
    pub weights: Vec<f64>,
    pub log_marginal_likelihood: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(l: f64, s2: f64, a: &[f64], b: &[f64]) -> f64 {
    s2 * (-sq_dist(a, b) / (2.0 * l * l)).exp()
}

struct Factor {
    weights: DVector<f64>,
    lml: f64,
}

fn factor(xs: &[Vec<f64>], yc: &DVector<f64>, l: f64, s2: f64, n2: f64) -> Option<Factor> {
    let n = xs.len();
    let base = DMatrix::from_fn(n, n, |i, j| {
        kernel(l, s2, &xs[i], &xs[j]) + if i == j { n2 } else { 0.0 }
    });
    let mut k = base.clone();
    let mut chol = k.clone().cholesky();
    let mut jitter = JITTER;
    let mut tries = 0;
    while chol.is_none() && tries < JITTER_TRIES {
        k = base.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        chol = k.clone().cholesky();
        jitter *= 10.0;
        tries += 1;
    }
    let chol = chol?;
    let weights = chol.solve(yc);
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * yc.dot(&weights) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    lml.is_finite().then_some(Factor { weights, lml })
}

/// Grid search over hyperparameters by log marginal likelihood; ties keep the first.
pub(super) fn fit(xs: &[Vec<f64>], ys: &[f64], grid: &GpGrid) -> Result<GpModel> {
    if xs.len() < 2 {
        return Err(MixError::Underdetermined {
            records: xs.len(),
            required: 2,
        });
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let yc = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - mean));
    let mut best: Option<(f64, f64, f64, Factor)> = None;
    for &l in &grid.lengthscales {
        for &s2 in &grid.signal_variances {
            for &n2 in &grid.noise_variances {
                if !(l > 0.0 && s2 > 0.0 && n2 > 0.0) {
                    return Err(MixError::InvalidConfig("GP hyperparameters must be positive".into()));
                }
                if let Some(f) = factor(xs, &yc, l, s2, n2) {
                    if best.as_ref().is_none_or(|b| f.lml > b.3.lml) {
                        best = Some((l, s2, n2, f));
                    }
                }
            }
        }
    }
    let (l, s2, n2, f) = best.ok_or(MixError::SingularKernel)?;
    Ok(GpModel {
        lengthscale: l,
        signal_variance: s2,
        noise_variance: n2,
        mean,
        train_x: xs.to_vec(),
        weights: f.weights.as_slice().to_vec(),
        log_marginal_likelihood: f.lml,
    })
}

impl GpModel {
    pub fn predict(&self, p: &[f64]) -> f64 {
        self.mean
            + self
                .train_x
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| w * kernel(self.lengthscale, self.signal_variance, p, x))
                .sum::<f64>()
    }

    pub fn gradient(&self, p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        let l2 = self.lengthscale * self.lengthscale;
        for (x, w) in self.train_x.iter().zip(&self.weights) {
            let k = kernel(self.lengthscale, self.signal_variance, p, x);
            for (g, (pj, xj)) in out.iter_mut().zip(p.iter().zip(x)) {
                *g -= w * k * (pj - xj) / l2;
            }
        }
    }
}
