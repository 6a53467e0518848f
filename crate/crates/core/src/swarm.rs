//! Dirichlet swarm sampling with dense, sparse and cap-constrained modes.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardUniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{caps_feasible, repetition_caps, DomainSet, Mixture, RepetitionBudget};
use crate::error::{MixError, Result};
use crate::rng::{streams, substream};

/// Consecutive rejected draws tolerated before giving up.
pub const MAX_REJECTIONS: usize = 10_000;

/// Smallest Dirichlet parameter; keeps zero-prior entries sampleable.
pub const ALPHA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Sparsity {
    Dense,
    Sparse { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub count: usize,
    pub prior: Mixture,
    /// Scales the Dirichlet parameters: `alpha_j = concentration * m * prior_j`.
    pub concentration: f64,
    pub sparsity: Sparsity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constrained: Option<RepetitionBudget>,
    pub seed: u64,
}

impl SwarmConfig {
    pub fn dense(count: usize, prior: Mixture, seed: u64) -> Self {
        Self {
            count,
            prior,
            concentration: 1.0,
            sparsity: Sparsity::Dense,
            constrained: None,
            seed,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.count == 0 {
            return Err(MixError::InvalidConfig("swarm size must be at least 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(MixError::InvalidConfig("concentration must be positive".into()));
        }
        if let Sparsity::Sparse { threshold } = self.sparsity {
            if !(threshold > 0.0 && threshold < 0.5) {
                return Err(MixError::InvalidConfig(format!(
                    "sparse threshold {threshold} outside (0, 0.5)"
                )));
            }
        }
        if self.prior.len() != m {
            return Err(MixError::DimensionMismatch {
                expected: m,
                got: self.prior.len(),
            });
        }
        Ok(())
    }
}

/// Samples `cfg.count` mixtures over `d`.
pub fn sample_swarm(d: &DomainSet, cfg: &SwarmConfig) -> Result<Vec<Mixture>> {
    let caps = match &cfg.constrained {
        Some(b) => {
            let c = repetition_caps(d, b);
            if !c.feasible {
                return Err(MixError::InfeasibleCaps {
                    sum: c.caps.iter().sum(),
                });
            }
            Some(c.caps)
        }
        None => None,
    };
    sample_with_caps(cfg, caps.as_deref(), &[])
}

/// Lower-level sampler: explicit caps, and coordinates exempt from sparse clipping.
pub fn sample_with_caps(
    cfg: &SwarmConfig,
    caps: Option<&[f64]>,
    protected: &[usize],
) -> Result<Vec<Mixture>> {
    let m = cfg.prior.len();
    cfg.validate(m)?;
    if let Some(c) = caps {
        if c.len() != m {
            return Err(MixError::DimensionMismatch {
                expected: m,
                got: c.len(),
            });
        }
        if !caps_feasible(c) {
            return Err(MixError::InfeasibleCaps { sum: c.iter().sum() });
        }
    }
    let alpha = dirichlet_alpha(cfg.prior.weights(), cfg.concentration * m as f64);
    (0..cfg.count)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(cfg.seed, streams::SWARM, k as u64);
            draw_one(&mut rng, &alpha, cfg.sparsity, caps, protected)
        })
        .collect()
}

/// `alpha_j = max(scale * prior_j, ALPHA_FLOOR)`.
pub fn dirichlet_alpha(prior: &[f64], scale: f64) -> Vec<f64> {
    prior.iter().map(|&p| (scale * p).max(ALPHA_FLOOR)).collect()
}

fn draw_one<R: Rng>(
    rng: &mut R,
    alpha: &[f64],
    sparsity: Sparsity,
    caps: Option<&[f64]>,
    protected: &[usize],
) -> Result<Mixture> {
    for _ in 0..MAX_REJECTIONS {
        let mut w = dirichlet_draw(rng, alpha);
        match sparsity {
            Sparsity::Dense => {
                if w.iter().any(|&x| x <= 0.0) {
                    continue;
                }
            }
            Sparsity::Sparse { threshold } => {
                for (j, x) in w.iter_mut().enumerate() {
                    if *x < threshold && !protected.contains(&j) {
                        *x = 0.0;
                    }
                }
                let s: f64 = w.iter().sum();
                if s <= 0.0 {
                    continue;
                }
                w.iter_mut().for_each(|x| *x /= s);
            }
        }
        if let Some(c) = caps {
            if w.iter().zip(c).any(|(x, u)| *x > u + 1e-12) {
                continue;
            }
        }
        return Mixture::new(w);
    }
    Err(MixError::RejectionExhausted {
        attempts: MAX_REJECTIONS,
    })
}

/// One Dirichlet draw. Gammas are sampled in log space so tiny shapes do not
/// underflow to exact zeros before normalization.
pub fn dirichlet_draw<R: Rng>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| log_gamma_draw(rng, a)).collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn log_gamma_draw<R: Rng>(rng: &mut R, a: f64) -> f64 {
    if a >= 1.0 {
        let g: f64 = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
        g.ln()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let g: f64 = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
        let u: f64 = StandardUniform.sample(rng);
        g.ln() + u.max(f64::MIN_POSITIVE).ln() / a
    }
}

/// `c (m + 1)` runs for `m` domains.
pub fn recommended_swarm_size(m: usize, c: usize) -> usize {
    c * (m + 1)
}

/// Swarm size used by the development-cycle simulation for multiplier `c`.
///
/// `c = 1` gives `m + 1`; `c = 3` gives the power of two nearest `3 (m + 1)`
/// (ties round down); `c = 2` halves the `c = 3` size. Other multipliers
/// fall back to `c (m + 1)`. A problem with no free coordinates needs no runs.
pub fn scheduled_swarm_size(m: usize, c: usize) -> usize {
    if m == 0 {
        return 0;
    }
    match c {
        1 => m + 1,
        2 => scheduled_swarm_size(m, 3) / 2,
        3 => nearest_power_of_two(3 * (m + 1)),
        _ => recommended_swarm_size(m, c),
    }
}

fn nearest_power_of_two(x: usize) -> usize {
    if x.is_power_of_two() {
        return x;
    }
    let hi = x.next_power_of_two();
    let lo = hi / 2;
    if x - lo <= hi - x {
        lo
    } else {
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_set(m: usize) -> DomainSet {
        DomainSet::new(
            (0..m)
                .map(|j| crate::domain::Domain::new(format!("d{j}"), 1000))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sizes() {
        assert_eq!(recommended_swarm_size(24, 3), 75);
        assert_eq!(recommended_swarm_size(1, 1), 2);
        assert_eq!(recommended_swarm_size(6, 5), 35);
        assert_eq!(scheduled_swarm_size(24, 3), 64);
        assert_eq!(scheduled_swarm_size(24, 2), 32);
        assert_eq!(scheduled_swarm_size(24, 1), 25);
        assert_eq!(scheduled_swarm_size(7, 3), 16);
        assert_eq!(scheduled_swarm_size(63, 3), 128);
        assert_eq!(scheduled_swarm_size(44, 3), 128);
        assert_eq!(scheduled_swarm_size(0, 3), 0);
    }

    #[test]
    fn sparse_draws_clip_below_threshold() {
        let d = uniform_set(3);
        let cfg = SwarmConfig {
            sparsity: Sparsity::Sparse { threshold: 0.05 },
            ..SwarmConfig::dense(500, Mixture::uniform(3), 11)
        };
        let swarm = sample_swarm(&d, &cfg).unwrap();
        assert_eq!(swarm.len(), 500);
        let mut clipped = 0;
        for mix in &swarm {
            let w = mix.weights();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let zero_mass = w.iter().filter(|&&x| x == 0.0).count();
            clipped += zero_mass;
            // survivors were >= 0.05 before renormalization, which only scales up
            assert!(w.iter().all(|&x| x == 0.0 || x >= 0.05));
        }
        assert!(clipped > 0);
    }

    #[test]
    fn dense_draws_are_positive() {
        let d = uniform_set(2);
        for seed in 0..20 {
            let swarm = sample_swarm(&d, &SwarmConfig::dense(50, Mixture::uniform(2), seed)).unwrap();
            assert!(swarm.iter().all(|m| m.weights().iter().all(|&x| x > 0.0)));
        }
    }

    #[test]
    fn constrained_draws_respect_caps() {
        let d = DomainSet::from_pairs(&[("a", 25), ("b", 25), ("c", 1000), ("d", 1000)]).unwrap();
        let b = RepetitionBudget::new(4.0, 1000).unwrap();
        let caps = repetition_caps(&d, &b).caps;
        assert_eq!(caps, vec![0.1, 0.1, 1.0, 1.0]);
        let cfg = SwarmConfig {
            constrained: Some(b),
            ..SwarmConfig::dense(200, Mixture::uniform(4), 5)
        };
        for mix in sample_swarm(&d, &cfg).unwrap() {
            for (x, u) in mix.weights().iter().zip(&caps) {
                assert!(*x <= u + 1e-12);
            }
        }
    }

    #[test]
    fn impossible_caps_exhaust_rejections() {
        let prior = Mixture::new(vec![0.98, 0.01, 0.01]).unwrap();
        let cfg = SwarmConfig {
            concentration: 1e4,
            ..SwarmConfig::dense(1, prior, 3)
        };
        let err = sample_with_caps(&cfg, Some(&[0.01, 1.0, 1.0]), &[]).unwrap_err();
        assert!(matches!(err, MixError::RejectionExhausted { .. }));
    }

    #[test]
    fn sample_mean_tracks_prior() {
        let prior = Mixture::new(vec![0.5, 0.3, 0.2]).unwrap();
        let d = uniform_set(3);
        let cfg = SwarmConfig {
            concentration: 2.0,
            ..SwarmConfig::dense(10_000, prior.clone(), 99)
        };
        let swarm = sample_swarm(&d, &cfg).unwrap();
        let a0 = cfg.concentration * 3.0;
        for j in 0..3 {
            let mean = swarm.iter().map(|m| m.weights()[j]).sum::<f64>() / 10_000.0;
            let p = prior.weights()[j];
            let var = p * (1.0 - p) / (a0 + 1.0);
            let sigma = (var / 10_000.0).sqrt();
            assert!((mean - p).abs() < 3.0 * sigma, "j={j} mean={mean} p={p}");
        }
    }

    #[test]
    fn protected_coordinate_never_clipped() {
        let prior = Mixture::new(vec![0.01, 0.495, 0.495]).unwrap();
        let cfg = SwarmConfig {
            sparsity: Sparsity::Sparse { threshold: 0.2 },
            concentration: 50.0,
            ..SwarmConfig::dense(200, prior, 1)
        };
        let swarm = sample_with_caps(&cfg, None, &[0]).unwrap();
        assert!(swarm.iter().all(|m| m.weights()[0] > 0.0));
    }

    #[test]
    fn bad_configs() {
        let d = uniform_set(2);
        let mut cfg = SwarmConfig::dense(0, Mixture::uniform(2), 0);
        assert!(sample_swarm(&d, &cfg).is_err());
        cfg.count = 3;
        cfg.sparsity = Sparsity::Sparse { threshold: 0.6 };
        assert!(sample_swarm(&d, &cfg).is_err());
        cfg.sparsity = Sparsity::Dense;
        cfg.concentration = 0.0;
        assert!(sample_swarm(&d, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn deterministic_given_seed(seed in any::<u64>(), m in 1usize..6) {
            let d = uniform_set(m);
            let cfg = SwarmConfig::dense(8, Mixture::uniform(m), seed);
            prop_assert_eq!(sample_swarm(&d, &cfg).unwrap(), sample_swarm(&d, &cfg).unwrap());
        }

        #[test]
        fn draws_live_on_the_simplex(seed in any::<u64>(), m in 1usize..8, thr in 0.01f64..0.3) {
            let d = uniform_set(m);
            let cfg = SwarmConfig {
                sparsity: Sparsity::Sparse { threshold: thr },
                ..SwarmConfig::dense(16, Mixture::uniform(m), seed)
            };
            for mix in sample_swarm(&d, &cfg).unwrap() {
                let s: f64 = mix.weights().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(mix.weights().iter().all(|&x| x >= 0.0));
            }
        }
    }
}
