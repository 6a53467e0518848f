//! Levenberg-Marquardt for small dense least-squares problems.

use nalgebra::{DMatrix, DVector};

/// A residual vector `r(theta)` with its Jacobian.
pub trait Residuals {
    fn n_params(&self) -> usize;
    fn residuals(&self, theta: &[f64]) -> DVector<f64>;
    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Stop once `|J^T r|_inf` falls below this.
    pub gradient_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            gradient_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub theta: Vec<f64>,
    /// Half the squared residual norm.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn cost_of(r: &DVector<f64>) -> f64 {
    let c = 0.5 * r.norm_squared();
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Minimizes `0.5 |r(theta)|^2` from `theta0`.
pub fn levenberg_marquardt<P: Residuals>(problem: &P, theta0: &[f64], opts: LmOptions) -> LmResult {
    let n = problem.n_params();
    let mut theta = DVector::from_column_slice(theta0);
    let mut r = problem.residuals(theta.as_slice());
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return LmResult {
            theta: theta0.to_vec(),
            cost,
            iterations: 0,
            converged: false,
        };
    }
    let mut j = problem.jacobian(theta.as_slice());
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let jtr = j.tr_mul(&r);
        if jtr.amax() < opts.gradient_tol || cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let jtj = j.tr_mul(&j);
        let mut a = jtj.clone();
        for k in 0..n {
            a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&(-&jtr)),
            None => {
                mu *= nu;
                nu *= 2.0;
                if mu > 1e32 {
                    break;
                }
                continue;
            }
        };
        let candidate = &theta + &step;
        let r_new = problem.residuals(candidate.as_slice());
        let cost_new = cost_of(&r_new);
        // predicted reduction of the damped quadratic model
        let predicted = -(step.dot(&jtr) + 0.5 * step.dot(&(&jtj * &step)));
        let rho = if predicted > 0.0 {
            (cost - cost_new) / predicted
        } else {
            -1.0
        };
        if cost_new.is_finite() && cost_new < cost && rho > 0.0 {
            let small_step = step.amax() <= 1e-15 * (theta.amax() + 1e-15);
            let small_gain = cost - cost_new <= 1e-16 * cost;
            theta = candidate;
            r = r_new;
            cost = cost_new;
            j = problem.jacobian(theta.as_slice());
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            mu = mu.max(1e-15);
            nu = 2.0;
            if small_step || small_gain {
                converged = true;
                break;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e32 {
                // no descent direction left at machine precision
                converged = j.tr_mul(&r).amax() < opts.gradient_tol.sqrt();
                break;
            }
        }
    }
    LmResult {
        theta: theta.as_slice().to_vec(),
        cost,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fits `y = a exp(b x)`.
    struct ExpCurve {
        x: Vec<f64>,
        y: Vec<f64>,
    }

    impl Residuals for ExpCurve {
        fn n_params(&self) -> usize {
            2
        }
        fn residuals(&self, t: &[f64]) -> DVector<f64> {
            DVector::from_iterator(
                self.x.len(),
                self.x.iter().zip(&self.y).map(|(x, y)| t[0] * (t[1] * x).exp() - y),
            )
        }
        fn jacobian(&self, t: &[f64]) -> DMatrix<f64> {
            DMatrix::from_fn(self.x.len(), 2, |i, k| {
                let e = (t[1] * self.x[i]).exp();
                if k == 0 {
                    e
                } else {
                    t[0] * self.x[i] * e
                }
            })
        }
    }

    #[test]
    fn recovers_exponential_curve() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        let y = x.iter().map(|x| 2.5 * (-1.3 * x).exp()).collect();
        let out = levenberg_marquardt(&ExpCurve { x, y }, &[1.0, 0.0], LmOptions::default());
        assert!(out.converged);
        assert!((out.theta[0] - 2.5).abs() < 1e-8);
        assert!((out.theta[1] + 1.3).abs() < 1e-8);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = ExpCurve {
            x: vec![0.1, 0.7, 1.9],
            y: vec![0.0; 3],
        };
        let t = [0.7, -0.4];
        let j = p.jacobian(&t);
        for k in 0..2 {
            let h = 1e-6;
            let mut tp = t;
            let mut tm = t;
            tp[k] += h;
            tm[k] -= h;
            let fd = (p.residuals(&tp) - p.residuals(&tm)) / (2.0 * h);
            for i in 0..3 {
                assert!((fd[i] - j[(i, k)]).abs() < 1e-7);
            }
        }
    }
}
