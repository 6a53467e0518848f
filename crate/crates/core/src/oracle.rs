//! Performance oracles: a synthetic log-linear ground truth, and ingestion of
//! externally produced swarm results.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainSet, Mixture};
use crate::error::{MixError, Result};
use crate::optimize::{solve_exact, SolveOutcome, SolveSpec, SolverKind};
use crate::regression::LogLinearObjective;
use crate::rng::{streams, substream};

/// `y_i = c_i + exp(A_i . p) + noise`, with slopes keyed by domain id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub tasks: Vec<String>,
    pub domains: Vec<String>,
    pub offsets: Vec<f64>,
    /// One row per task, one column per entry of `domains`.
    pub slopes: Vec<Vec<f64>>,
    pub noise_sd: f64,
}

impl GroundTruthModel {
    pub fn new(
        tasks: Vec<String>,
        domains: Vec<String>,
        offsets: Vec<f64>,
        slopes: Vec<Vec<f64>>,
        noise_sd: f64,
    ) -> Result<Self> {
        let g = Self {
            tasks,
            domains,
            offsets,
            slopes,
            noise_sd,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        if n == 0 || self.domains.is_empty() {
            return Err(MixError::InvalidConfig("truth needs tasks and domains".into()));
        }
        if self.offsets.len() != n || self.slopes.len() != n {
            return Err(MixError::DimensionMismatch {
                expected: n,
                got: self.offsets.len().min(self.slopes.len()),
            });
        }
        if self.offsets.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(MixError::InvalidConfig("offsets must be positive".into()));
        }
        for row in &self.slopes {
            if row.len() != self.domains.len() {
                return Err(MixError::DimensionMismatch {
                    expected: self.domains.len(),
                    got: row.len(),
                });
            }
            if row.iter().any(|a| !a.is_finite()) {
                return Err(MixError::InvalidConfig("slopes must be finite".into()));
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(MixError::InvalidConfig("noise_sd must be >= 0".into()));
        }
        Ok(())
    }

    /// Offsets `U(0.2, 1)`, slopes `N(0, 1) / sqrt(m)`.
    pub fn random(n_tasks: usize, domains: &[String], noise_sd: f64, seed: u64) -> Result<Self> {
        let m = domains.len();
        let mut rng = substream(seed, streams::TRUTH, 0);
        let scale = 1.0 / (m as f64).sqrt();
        let offsets = (0..n_tasks).map(|_| rng.random_range(0.2..1.0)).collect();
        let slopes = (0..n_tasks)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        Self::new(
            (0..n_tasks).map(|i| format!("task{i:02}")).collect(),
            domains.to_vec(),
            offsets,
            slopes,
            noise_sd,
        )
    }

    /// Task `i` strongly prefers domain `i mod m` (slope `-strength`) on top
    /// of `N(0, sd^2)` slopes, so optima mix many domains instead of sitting on
    /// a vertex.
    pub fn specialist(n_tasks: usize, domains: &[String], strength: f64, sd: f64, noise_sd: f64, seed: u64) -> Result<Self> {
        let m = domains.len();
        let normal = Normal::new(0.0, sd).map_err(|_| MixError::InvalidConfig("slope sd must be >= 0".into()))?;
        let mut rng = substream(seed, streams::TRUTH, 2);
        let offsets = (0..n_tasks).map(|_| rng.random_range(0.2..1.0)).collect();
        let slopes = (0..n_tasks)
            .map(|i| {
                (0..m)
                    .map(|j| normal.sample(&mut rng) - if j == i % m { strength } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(
            (0..n_tasks).map(|i| format!("task{i:02}")).collect(),
            domains.to_vec(),
            offsets,
            slopes,
            noise_sd,
        )
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn noiseless(&self) -> Self {
        Self {
            noise_sd: 0.0,
            ..self.clone()
        }
    }

    /// The same truth with columns reordered (and subset) to `ids`.
    pub fn restrict(&self, ids: &[String]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = self
            .domains
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_str(), i))
            .collect();
        let cols: Vec<usize> = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| MixError::UnknownDomain(id.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tasks: self.tasks.clone(),
            domains: ids.to_vec(),
            offsets: self.offsets.clone(),
            slopes: self
                .slopes
                .iter()
                .map(|row| cols.iter().map(|&c| row[c]).collect())
                .collect(),
            noise_sd: self.noise_sd,
        })
    }

    pub fn on(&self, d: &DomainSet) -> Result<Self> {
        self.restrict(&d.ids())
    }

    /// Mean noiseless loss `(1/n) sum_i (c_i + exp(A_i . p))`.
    pub fn objective(&self) -> LogLinearObjective {
        LogLinearObjective::uniform(self.offsets.clone(), self.slopes.clone())
    }

    fn noiseless_scores(&self, p: &[f64]) -> Vec<f64> {
        self.offsets
            .iter()
            .zip(&self.slopes)
            .map(|(c, a)| c + a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>().exp())
            .collect()
    }
}

/// Per-task scores at `p`; noise is drawn from a stream fixed by `seed`.
pub fn evaluate_truth(g: &GroundTruthModel, p: &Mixture, seed: u64) -> Result<Vec<f64>> {
    if p.len() != g.domains.len() {
        return Err(MixError::DimensionMismatch {
            expected: g.domains.len(),
            got: p.len(),
        });
    }
    let mut y = g.noiseless_scores(p.weights());
    if g.noise_sd > 0.0 {
        let normal = Normal::new(0.0, g.noise_sd).expect("validated sd");
        let mut rng = substream(seed, streams::NOISE, 0);
        for v in y.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(y)
}

/// Minimizer of the noiseless mean loss plus `lambda KL(p || p0)` under `caps`.
pub fn truth_optimum(
    g: &GroundTruthModel,
    caps: Option<Vec<f64>>,
    lambda: f64,
    p0: &Mixture,
) -> Result<SolveOutcome> {
    let spec = SolveSpec::new(
        lambda,
        p0.clone(),
        caps,
        SolverKind::Exact {
            tol: 1e-10,
            max_iters: 200_000,
        },
    );
    solve_exact(&g.objective(), &spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmRecord {
    pub mixture: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Paired (mixture, per-task score) records over one domain list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmDataset {
    pub domains: Vec<String>,
    pub tasks: Vec<String>,
    pub records: Vec<SwarmRecord>,
}

impl SwarmDataset {
    pub fn new(domains: Vec<String>, tasks: Vec<String>, records: Vec<SwarmRecord>) -> Result<Self> {
        let ds = Self {
            domains,
            tasks,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.records.is_empty() || self.domains.is_empty() {
            return Err(MixError::Schema("dataset needs domains, tasks and records".into()));
        }
        for (row, r) in self.records.iter().enumerate() {
            if r.mixture.len() != self.domains.len() || r.scores.len() != self.tasks.len() {
                return Err(MixError::Schema(format!("record {row} has the wrong width")));
            }
            if r.scores.iter().any(|s| !s.is_finite()) {
                return Err(MixError::Schema(format!("record {row} has a non-finite score")));
            }
            let sum: f64 = r.mixture.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || r.mixture.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return Err(MixError::SimplexViolation { row, sum });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn mixtures(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.mixture.as_slice()).collect()
    }

    /// Scores of one task across records.
    pub fn column(&self, task: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.scores[task]).collect()
    }

    /// Concatenates records of two datasets over the same domains and tasks.
    pub fn extend(&mut self, other: SwarmDataset) -> Result<()> {
        if other.domains != self.domains || other.tasks != self.tasks {
            return Err(MixError::Schema("datasets disagree on domains or tasks".into()));
        }
        self.records.extend(other.records);
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = self
            .domains
            .iter()
            .map(|d| format!("mix:{d}"))
            .chain(self.tasks.iter().map(|t| format!("task:{t}")))
            .collect();
        wr.write_record(&header)?;
        for r in &self.records {
            let row: Vec<String> = r
                .mixture
                .iter()
                .chain(&r.scores)
                .map(|v| format!("{v:?}"))
                .collect();
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads a results CSV. Columns may come in any order; mixture columns are
/// reordered lexicographically. With `expected`, every mixture column must
/// name a domain of that set and every domain must have a column.
pub fn ingest_results(path: &Path, expected: Option<&DomainSet>) -> Result<SwarmDataset> {
    let f = std::fs::File::open(path)?;
    ingest_results_from(f, expected)
}

pub fn ingest_results_from<R: std::io::Read>(rd: R, expected: Option<&DomainSet>) -> Result<SwarmDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rd);
    let header = reader.headers()?.clone();
    let mut mix_cols: Vec<(String, usize)> = Vec::new();
    let mut task_cols: Vec<(String, usize)> = Vec::new();
    for (i, h) in header.iter().enumerate() {
        let h = h.trim();
        if let Some(id) = h.strip_prefix("mix:") {
            mix_cols.push((id.to_string(), i));
        } else if let Some(id) = h.strip_prefix("task:") {
            task_cols.push((id.to_string(), i));
        } else {
            return Err(MixError::Schema(format!("unrecognized column '{h}'")));
        }
    }
    if mix_cols.is_empty() || task_cols.is_empty() {
        return Err(MixError::Schema("need mix: and task: columns".into()));
    }
    mix_cols.sort();
    for w in mix_cols.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(MixError::Schema(format!("duplicate column mix:{}", w[0].0)));
        }
    }
    if let Some(d) = expected {
        for (id, _) in &mix_cols {
            if !d.contains(id) {
                return Err(MixError::UnknownDomainColumn(id.clone()));
            }
        }
        if mix_cols.len() != d.len() {
            return Err(MixError::Schema(format!(
                "{} mixture columns for {} domains",
                mix_cols.len(),
                d.len()
            )));
        }
    }
    let parse = |s: &str, row: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| MixError::Schema(format!("row {row}: '{s}' is not a number")))
    };
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut mixture = Vec::with_capacity(mix_cols.len());
        for (_, c) in &mix_cols {
            mixture.push(parse(rec.get(*c).unwrap_or(""), row)?);
        }
        let sum: f64 = mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || mixture.iter().any(|&w| w < 0.0) {
            return Err(MixError::SimplexViolation { row, sum });
        }
        mixture.iter_mut().for_each(|w| *w /= sum);
        let scores = task_cols
            .iter()
            .map(|(_, c)| parse(rec.get(*c).unwrap_or(""), row))
            .collect::<Result<Vec<_>>>()?;
        records.push(SwarmRecord { mixture, scores });
    }
    SwarmDataset::new(
        mix_cols.into_iter().map(|(id, _)| id).collect(),
        task_cols.into_iter().map(|(id, _)| id).collect(),
        records,
    )
}

/// Something that can score a batch of mixtures.
pub trait Oracle: Sync {
    fn tasks(&self) -> Vec<String>;
    /// Scores `mixtures` over `domains`; run `j` draws noise from a stream derived from `(seed, j)`.
    fn evaluate(&self, domains: &[String], mixtures: &[Mixture], seed: u64) -> Result<SwarmDataset>;
}

impl Oracle for GroundTruthModel {
    fn tasks(&self) -> Vec<String> {
        self.tasks.clone()
    }

    fn evaluate(&self, domains: &[String], mixtures: &[Mixture], seed: u64) -> Result<SwarmDataset> {
        let g = self.restrict(domains)?;
        let records = mixtures
            .par_iter()
            .enumerate()
            .map(|(j, mix)| {
                let scores = evaluate_truth(&g, mix, crate::rng::derive(seed, streams::NOISE, j as u64))?;
                Ok(SwarmRecord {
                    mixture: mix.weights().to_vec(),
                    scores,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SwarmDataset::new(domains.to_vec(), self.tasks.clone(), records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|j| format!("d{j}")).collect()
    }

    #[test]
    fn evaluate_examples() {
        let g = GroundTruthModel::new(vec!["t".into()], ids(3), vec![1.0], vec![vec![0.0; 3]], 0.0).unwrap();
        assert_eq!(evaluate_truth(&g, &Mixture::uniform(3), 0).unwrap(), vec![2.0]);
        let ln2 = 2f64.ln();
        let g = GroundTruthModel::new(vec!["t".into()], ids(2), vec![0.5], vec![vec![ln2, ln2]], 0.0).unwrap();
        let y = evaluate_truth(&g, &Mixture::uniform(2), 0).unwrap();
        assert!((y[0] - 2.5).abs() < 1e-14);
        let noisy = GroundTruthModel { noise_sd: 0.01, ..g };
        let p = Mixture::uniform(2);
        assert_eq!(evaluate_truth(&noisy, &p, 7).unwrap(), evaluate_truth(&noisy, &p, 7).unwrap());
        assert_ne!(evaluate_truth(&noisy, &p, 7).unwrap(), evaluate_truth(&noisy, &p, 8).unwrap());
        assert!(matches!(
            evaluate_truth(&noisy, &Mixture::uniform(3), 0),
            Err(MixError::DimensionMismatch { .. })
        ));
    }

    fn grid_optimum(g: &GroundTruthModel, caps: &[f64], lambda: f64, p0: &[f64]) -> Vec<f64> {
        let m = g.domains.len();
        let obj = g.objective();
        let steps = 100;
        let mut best = (f64::INFINITY, vec![]);
        let mut visit = |p: Vec<f64>| {
            if p.iter().zip(caps).any(|(x, u)| *x > u + 1e-12) {
                return;
            }
            let v = crate::optimize::Objective::value(&obj, &p)
                + lambda * crate::optimize::kl_divergence(&p, p0);
            if v < best.0 {
                best = (v, p);
            }
        };
        match m {
            1 => visit(vec![1.0]),
            2 => (0..=steps).for_each(|i| {
                let x = i as f64 / steps as f64;
                visit(vec![x, 1.0 - x])
            }),
            3 => {
                for i in 0..=steps {
                    for j in 0..=steps - i {
                        let x = i as f64 / steps as f64;
                        let y = j as f64 / steps as f64;
                        visit(vec![x, y, (1.0 - x - y).max(0.0)]);
                    }
                }
            }
            _ => unreachable!(),
        }
        best.1
    }

    #[test]
    fn optimum_examples() {
        let g = GroundTruthModel::new(vec!["t".into()], ids(2), vec![1.0], vec![vec![1.0, 0.0]], 0.0).unwrap();
        let out = truth_optimum(&g, None, 0.0, &Mixture::uniform(2)).unwrap();
        assert!((out.mixture.weights()[1] - 1.0).abs() < 1e-9);
        let g2 = GroundTruthModel::new(vec!["t".into()], ids(2), vec![1.0], vec![vec![-1.0, 0.0]], 0.0).unwrap();
        let out = truth_optimum(&g2, Some(vec![0.3, 1.0]), 0.0, &Mixture::uniform(2)).unwrap();
        assert!((out.mixture.weights()[0] - 0.3).abs() < 1e-12);
        let p0 = Mixture::new(vec![0.2, 0.8]).unwrap();
        let out = truth_optimum(&g, None, 1e6, &p0).unwrap();
        assert!((out.mixture.weights()[0] - 0.2).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn optimum_matches_grid(seed in any::<u64>(), m in 1usize..=3, lam in prop::sample::select(vec![0.0, 0.05]), capped in any::<bool>()) {
            let g = GroundTruthModel::random(2, &ids(m), 0.0, seed).unwrap();
            let g = GroundTruthModel { slopes: g.slopes.iter().map(|r| r.iter().map(|a| a * 3.0).collect()).collect(), ..g };
            let caps = if capped && m > 1 { let mut c = vec![1.0; m]; c[0] = 0.3; c } else { vec![1.0; m] };
            let p0 = Mixture::uniform(m);
            let out = truth_optimum(&g, Some(caps.clone()), lam, &p0).unwrap();
            let grid = grid_optimum(&g, &caps, lam, p0.weights());
            let tv: f64 = 0.5 * out.mixture.weights().iter().zip(&grid).map(|(a, b)| (a - b).abs()).sum::<f64>();
            prop_assert!(tv <= 0.02, "tv {tv}");
        }

        #[test]
        fn noiseless_truth_is_midpoint_convex(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let g = GroundTruthModel::random(3, &ids(4), 0.0, seed).unwrap();
            let p = Mixture::new(vec![a, 1.0 - a, 0.0, 0.0]).unwrap();
            let q = Mixture::new(vec![0.0, b, 1.0 - b, 0.5]).unwrap();
            let mid = Mixture::new(p.weights().iter().zip(q.weights()).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
            let yp = evaluate_truth(&g, &p, 0).unwrap();
            let yq = evaluate_truth(&g, &q, 0).unwrap();
            let ym = evaluate_truth(&g, &mid, 0).unwrap();
            for i in 0..3 {
                prop_assert!(ym[i] <= 0.5 * (yp[i] + yq[i]) + 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ds = SwarmDataset::new(
            vec!["a".into(), "b".into()],
            vec!["t1".into()],
            vec![SwarmRecord { mixture: vec![0.25, 0.75], scores: vec![1.5] }],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv_to(&mut buf).unwrap();
        let back = ingest_results_from(buf.as_slice(), None).unwrap();
        assert_eq!(back, ds);

        let shuffled = "task:t1,mix:b,mix:a\n1.5,0.75,0.25\n";
        assert_eq!(ingest_results_from(shuffled.as_bytes(), None).unwrap(), ds);

        let off = "mix:a,mix:b,task:t\n0.5,0.6,1\n";
        assert!(matches!(ingest_results_from(off.as_bytes(), None), Err(MixError::SimplexViolation { .. })));
        let d = DomainSet::from_pairs(&[("a", 1), ("c", 1)]).unwrap();
        let good = "mix:a,mix:b,task:t\n0.5,0.5,1\n";
        assert!(matches!(ingest_results_from(good.as_bytes(), Some(&d)), Err(MixError::UnknownDomainColumn(_))));
        assert!(matches!(ingest_results_from("foo,mix:a\n1,1\n".as_bytes(), None), Err(MixError::Schema(_))));
        let slight = "mix:a,mix:b,task:t\n0.5,0.5000005,1\n";
        let ds = ingest_results_from(slight.as_bytes(), None).unwrap();
        assert!((ds.records[0].mixture.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_noise_varies_by_run() {
        let g = GroundTruthModel::random(2, &ids(3), 0.05, 1).unwrap();
        let mixes = vec![Mixture::uniform(3), Mixture::uniform(3)];
        let ds = g.evaluate(&ids(3), &mixes, 9).unwrap();
        assert_ne!(ds.records[0].scores, ds.records[1].scores);
        assert_eq!(ds, g.evaluate(&ids(3), &mixes, 9).unwrap());
    }
}
