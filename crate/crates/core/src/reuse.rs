//! Mixture reuse after a domain update: the collapse/expand reparameterization,
//! reuse plans, and the swarm-mapping rules for reusing old proxy runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{
    Domain, DomainSet, DomainUpdate, Mixture, NamedMixture, RepetitionBudget, UpdateKind,
};
use crate::error::{MixError, Result};
use crate::oracle::{GroundTruthModel, Oracle, SwarmDataset, SwarmRecord};
use crate::pipeline::base::{run_base_with, BaseConfig, BaseOutcome};

/// A block of reused domains whose relative weights are frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixGroup {
    pub ids: Vec<String>,
    pub ratios: Mixture,
}

/// Which post-update domains are reused (in frozen groups) and which are recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReusePlan {
    pub post_update: DomainSet,
    pub groups: Vec<FixGroup>,
    pub d_comp: Vec<String>,
}

/// Weights in collapsed space: one per frozen group, then the recomputed domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapsedMixture {
    pub virtual_weights: Vec<f64>,
    pub comp_weights: Vec<f64>,
}

impl CollapsedMixture {
    /// Total weight on reused domains.
    pub fn rho(&self) -> f64 {
        self.virtual_weights.iter().sum()
    }
}

impl ReusePlan {
    /// One frozen group; every other domain is recomputed.
    pub fn new(post_update: DomainSet, d_fix: Vec<String>, frozen: Mixture) -> Result<Self> {
        Self::with_groups(post_update, vec![FixGroup { ids: d_fix, ratios: frozen }])
    }

    /// Several frozen groups; every domain outside them is recomputed.
    pub fn with_groups(post_update: DomainSet, groups: Vec<FixGroup>) -> Result<Self> {
        let fixed: BTreeSet<&str> = groups.iter().flat_map(|g| g.ids.iter().map(String::as_str)).collect();
        let d_comp = post_update
            .ids()
            .into_iter()
            .filter(|id| !fixed.contains(id.as_str()))
            .collect();
        let plan = Self {
            post_update,
            groups,
            d_comp,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Frozen ratios taken from `previous`, restricted to each group.
    pub fn from_previous(post_update: DomainSet, previous: &NamedMixture, groups: Vec<Vec<String>>) -> Result<Self> {
        let weights: BTreeMap<&str, f64> = previous
            .domains
            .iter()
            .map(String::as_str)
            .zip(previous.weights.iter().copied())
            .collect();
        let groups = groups
            .into_iter()
            .map(|ids| {
                let w = ids
                    .iter()
                    .map(|id| weights.get(id.as_str()).copied().ok_or_else(|| MixError::UnknownDomain(id.clone())))
                    .collect::<Result<Vec<f64>>>()?;
                let ratios = Mixture::new(w)
                    .map_err(|_| MixError::InvalidPlan("a reused group carries no weight in the previous mix".into()))?;
                Ok(FixGroup { ids, ratios })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_groups(post_update, groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.ids.is_empty()) {
            return Err(MixError::InvalidPlan("the reused set must be nonempty".into()));
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if g.ratios.len() != g.ids.len() {
                return Err(MixError::DimensionMismatch {
                    expected: g.ids.len(),
                    got: g.ratios.len(),
                });
            }
            for id in &g.ids {
                if !self.post_update.contains(id) {
                    return Err(MixError::UnknownDomain(id.clone()));
                }
                if !seen.insert(id.as_str()) {
                    return Err(MixError::InvalidPlan(format!("domain '{id}' is reused twice")));
                }
            }
        }
        for id in &self.d_comp {
            if !self.post_update.contains(id) || !seen.insert(id.as_str()) {
                return Err(MixError::InvalidPlan(format!("domain '{id}' is misplaced")));
            }
        }
        if seen.len() != self.post_update.len() {
            return Err(MixError::InvalidPlan("reused and recomputed sets must cover the domains".into()));
        }
        Ok(())
    }

    pub fn d_fix(&self) -> Vec<String> {
        self.groups.iter().flat_map(|g| g.ids.iter().cloned()).collect()
    }

    /// Collapsed dimension: one coordinate per group plus one per recomputed domain.
    pub fn collapsed_dim(&self) -> usize {
        self.groups.len() + self.d_comp.len()
    }

    pub fn virtual_id(&self, g: usize) -> String {
        if self.groups.len() == 1 {
            "(fixed)".into()
        } else {
            format!("(fixed-{:02})", g + 1)
        }
    }

    /// The collapsed domain set; a virtual domain holds its group's tokens.
    pub fn collapsed_domains(&self) -> Result<DomainSet> {
        let mut domains: Vec<Domain> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, grp)| {
                let tokens = grp
                    .ids
                    .iter()
                    .map(|id| self.post_update.get(id).map_or(0, |d| d.tokens))
                    .sum();
                Domain::new(self.virtual_id(g), tokens)
            })
            .collect();
        for id in &self.d_comp {
            domains.push(self.post_update.get(id).expect("validated").clone());
        }
        DomainSet::with_version(domains, self.post_update.version())
    }

    /// Index of each collapsed coordinate in `collapsed_domains()` order:
    /// `(virtual indices per group, comp indices)`.
    fn layout(&self) -> Result<(DomainSet, Vec<usize>, Vec<usize>)> {
        let cd = self.collapsed_domains()?;
        let v = (0..self.groups.len())
            .map(|g| cd.index_of(&self.virtual_id(g)).expect("present"))
            .collect();
        let c = self.d_comp.iter().map(|id| cd.index_of(id).expect("present")).collect();
        Ok((cd, v, c))
    }

    /// Mixture over `collapsed_domains()` order.
    pub fn to_collapsed_vector(&self, r: &CollapsedMixture) -> Result<Vec<f64>> {
        let (cd, v, c) = self.layout()?;
        let mut out = vec![0.0; cd.len()];
        for (i, &w) in v.iter().zip(&r.virtual_weights) {
            out[*i] = w;
        }
        for (i, &w) in c.iter().zip(&r.comp_weights) {
            out[*i] = w;
        }
        Ok(out)
    }

    pub fn from_collapsed_vector(&self, w: &[f64]) -> Result<CollapsedMixture> {
        let (cd, v, c) = self.layout()?;
        if w.len() != cd.len() {
            return Err(MixError::DimensionMismatch {
                expected: cd.len(),
                got: w.len(),
            });
        }
        Ok(CollapsedMixture {
            virtual_weights: v.iter().map(|&i| w[i]).collect(),
            comp_weights: c.iter().map(|&i| w[i]).collect(),
        })
    }

    /// Linear map `q = M r` as a `post_update x collapsed` matrix, row-major.
    pub fn expansion_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let (cd, v, c) = self.layout()?;
        let mut m = vec![vec![0.0; cd.len()]; self.post_update.len()];
        for (g, grp) in self.groups.iter().enumerate() {
            for (id, w) in grp.ids.iter().zip(grp.ratios.weights()) {
                m[self.post_update.index_of(id).expect("validated")][v[g]] = *w;
            }
        }
        for (id, &col) in self.d_comp.iter().zip(&c) {
            m[self.post_update.index_of(id).expect("validated")][col] = 1.0;
        }
        Ok(m)
    }

    /// The exact collapsed truth: slopes `B_i = M^T A_i` over `collapsed_domains()`.
    pub fn collapsed_truth(&self, g: &GroundTruthModel) -> Result<GroundTruthModel> {
        let full = g.on(&self.post_update)?;
        let m = self.expansion_matrix()?;
        let cd = self.collapsed_domains()?;
        let slopes = full
            .slopes
            .iter()
            .map(|a| {
                (0..cd.len())
                    .map(|k| a.iter().zip(&m).map(|(aj, row)| aj * row[k]).sum())
                    .collect()
            })
            .collect();
        GroundTruthModel::new(full.tasks.clone(), cd.ids(), full.offsets.clone(), slopes, full.noise_sd)
    }
}

/// `q_j = r_g p~_j` on frozen groups, `q_j = r_j` on recomputed domains.
pub fn expand(plan: &ReusePlan, r: &CollapsedMixture) -> Result<Mixture> {
    if r.virtual_weights.len() != plan.groups.len() || r.comp_weights.len() != plan.d_comp.len() {
        return Err(MixError::DimensionMismatch {
            expected: plan.collapsed_dim(),
            got: r.virtual_weights.len() + r.comp_weights.len(),
        });
    }
    let mut q = vec![0.0; plan.post_update.len()];
    for (grp, &rv) in plan.groups.iter().zip(&r.virtual_weights) {
        for (id, w) in grp.ids.iter().zip(grp.ratios.weights()) {
            q[plan.post_update.index_of(id).expect("validated")] = rv * w;
        }
    }
    for (id, &w) in plan.d_comp.iter().zip(&r.comp_weights) {
        q[plan.post_update.index_of(id).expect("validated")] = w;
    }
    Mixture::new(q)
}

/// Inverse of [`expand`] on the reuse subspace. The residual is the largest
/// total-variation distance between a group's normalized weights in `q` and
/// its frozen ratios; zero exactly when `q` lies in the subspace.
pub fn collapse(plan: &ReusePlan, q: &Mixture) -> Result<(CollapsedMixture, f64)> {
    if q.len() != plan.post_update.len() {
        return Err(MixError::DimensionMismatch {
            expected: plan.post_update.len(),
            got: q.len(),
        });
    }
    let w = q.weights();
    let mut residual: f64 = 0.0;
    let mut virtual_weights = vec![];
    for grp in &plan.groups {
        let part: Vec<f64> = grp
            .ids
            .iter()
            .map(|id| w[plan.post_update.index_of(id).expect("validated")])
            .collect();
        let rv: f64 = part.iter().sum();
        if rv > 0.0 {
            let tv = 0.5
                * part
                    .iter()
                    .zip(grp.ratios.weights())
                    .map(|(a, b)| (a / rv - b).abs())
                    .sum::<f64>();
            residual = residual.max(tv);
        }
        virtual_weights.push(rv);
    }
    let comp_weights = plan
        .d_comp
        .iter()
        .map(|id| w[plan.post_update.index_of(id).expect("validated")])
        .collect();
    Ok((
        CollapsedMixture {
            virtual_weights,
            comp_weights,
        },
        residual,
    ))
}

/// Caps in collapsed coordinates, in `collapsed_domains()` order.
///
/// A virtual coordinate may not exceed `k N'_j / (R p~_j)` for any member with
/// `p~_j > 0`; recomputed domains keep their own caps. Both are clipped to 1.
pub fn collapsed_caps(plan: &ReusePlan, b: &RepetitionBudget) -> Result<Vec<f64>> {
    let r = CollapsedMixture {
        virtual_weights: plan
            .groups
            .iter()
            .map(|grp| {
                grp.ids
                    .iter()
                    .zip(grp.ratios.weights())
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(id, &w)| b.cap_for(plan.post_update.get(id).expect("validated").tokens) / w)
                    .fold(f64::INFINITY, f64::min)
                    .min(1.0)
            })
            .collect(),
        comp_weights: plan
            .d_comp
            .iter()
            .map(|id| b.cap_for(plan.post_update.get(id).expect("validated").tokens))
            .collect(),
    };
    let caps = plan.to_collapsed_vector(&r)?;
    let sum: f64 = caps.iter().sum();
    if sum < 1.0 - 1e-12 {
        return Err(MixError::InfeasibleCaps { sum });
    }
    Ok(caps)
}

/// Weights on the surviving domains, renormalized; no proxy runs needed.
pub fn renormalize_remove(d: &DomainSet, p: &Mixture, removed: &[String]) -> Result<(Vec<String>, Mixture)> {
    if p.len() != d.len() {
        return Err(MixError::DimensionMismatch {
            expected: d.len(),
            got: p.len(),
        });
    }
    d.indices_of(removed)?;
    let gone: BTreeSet<&str> = removed.iter().map(String::as_str).collect();
    let keep: Vec<usize> = (0..d.len()).filter(|&j| !gone.contains(d.domains()[j].id.as_str())).collect();
    let ids = keep.iter().map(|&j| d.domains()[j].id.clone()).collect();
    let mix = p.restrict(&keep).ok_or(MixError::AllMassRemoved)?;
    Ok((ids, mix))
}

/// Scores collapsed mixtures by expanding them and querying a full-space oracle.
pub struct ExpandingOracle<'a> {
    pub plan: &'a ReusePlan,
    pub inner: &'a dyn Oracle,
}

impl Oracle for ExpandingOracle<'_> {
    fn tasks(&self) -> Vec<String> {
        self.inner.tasks()
    }

    fn evaluate(&self, domains: &[String], mixtures: &[Mixture], seed: u64) -> Result<SwarmDataset> {
        let cd = self.plan.collapsed_domains()?;
        if domains != cd.ids().as_slice() {
            return Err(MixError::Schema("expanding oracle called off its collapsed set".into()));
        }
        let expanded = mixtures
            .iter()
            .map(|r| expand(self.plan, &self.plan.from_collapsed_vector(r.weights())?))
            .collect::<Result<Vec<_>>>()?;
        let mut ds = self.inner.evaluate(&self.plan.post_update.ids(), &expanded, seed)?;
        ds.domains = domains.to_vec();
        for (rec, r) in ds.records.iter_mut().zip(mixtures) {
            rec.mixture = r.weights().to_vec();
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseOutcome {
    /// Proposed mixture over the post-update domains.
    pub mixture: Mixture,
    pub collapsed: CollapsedMixture,
    pub collapsed_ids: Vec<String>,
    pub runs: usize,
    pub base: Option<BaseOutcome>,
}

/// Solves the collapsed problem for `plan` and expands the answer.
///
/// The swarm is sampled in collapsed space (virtual coordinates are never
/// sparsity-clipped), caps come from [`collapsed_caps`], and the KL anchor is
/// the natural distribution of the collapsed domain set.
pub fn full_mix_reuse(plan: &ReusePlan, cfg: &BaseConfig, oracle: &dyn Oracle) -> Result<ReuseOutcome> {
    plan.validate()?;
    let cd = plan.collapsed_domains()?;
    if cd.len() == 1 {
        let r = CollapsedMixture {
            virtual_weights: vec![1.0],
            comp_weights: vec![],
        };
        return Ok(ReuseOutcome {
            mixture: expand(plan, &r)?,
            collapsed: r,
            collapsed_ids: cd.ids(),
            runs: 0,
            base: None,
        });
    }
    let caps = match &cfg.budget {
        Some(b) => Some(collapsed_caps(plan, b)?),
        None => None,
    };
    let protected: Vec<usize> = (0..plan.groups.len())
        .map(|g| cd.index_of(&plan.virtual_id(g)).expect("present"))
        .collect();
    let wrapped = ExpandingOracle { plan, inner: oracle };
    let out = run_base_with(&cd, caps, &protected, cfg, &wrapped)?;
    let r = plan.from_collapsed_vector(out.solve.mixture.weights())?;
    Ok(ReuseOutcome {
        mixture: expand(plan, &r)?,
        collapsed: r,
        collapsed_ids: cd.ids(),
        runs: out.swarm.len(),
        base: Some(out),
    })
}

/// Reuses only `partial_groups` (each a subset of the unaffected domains) and
/// recomputes everything else, ratios taken from `previous`.
pub fn partial_mix_reuse(
    post_update: &DomainSet,
    previous: &NamedMixture,
    unaffected: &[String],
    partial_groups: Vec<Vec<String>>,
    cfg: &BaseConfig,
    oracle: &dyn Oracle,
) -> Result<ReuseOutcome> {
    let allowed: BTreeSet<&str> = unaffected.iter().map(String::as_str).collect();
    if partial_groups.iter().all(|g| g.is_empty()) {
        return Err(MixError::InvalidPlan("partial reuse needs reused domains; use full recomputation".into()));
    }
    for id in partial_groups.iter().flatten() {
        if !allowed.contains(id.as_str()) {
            return Err(MixError::InvalidPlan(format!("'{id}' is not an unaffected domain")));
        }
    }
    let groups = partial_groups.into_iter().filter(|g| !g.is_empty()).collect();
    let plan = ReusePlan::from_previous(post_update.clone(), previous, groups)?;
    full_mix_reuse(&plan, cfg, oracle)
}

/// Old swarm mixes rewritten over the post-update domains.
///
/// Add pads introduced domains with zeros; Partition splits the parent's weight
/// over its children by token share. Other kinds cannot be mapped.
pub fn map_old_swarm(old: &SwarmDataset, update: &DomainUpdate, post_update: &DomainSet) -> Result<SwarmDataset> {
    match update.kind {
        UpdateKind::Add | UpdateKind::Partition => {}
        other => return Err(MixError::UnsupportedUpdateKind(other.to_string())),
    }
    let mut split: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    if update.kind == UpdateKind::Partition {
        let parent = update.affected[0].as_str();
        let total: f64 = update.introduced.iter().map(|c| c.tokens as f64).sum();
        let shares = update
            .introduced
            .iter()
            .map(|c| {
                let j = post_update.index_of(&c.id).ok_or_else(|| MixError::UnknownDomain(c.id.clone()))?;
                Ok((j, if total > 0.0 { c.tokens as f64 / total } else { 1.0 / update.introduced.len() as f64 }))
            })
            .collect::<Result<Vec<_>>>()?;
        split.insert(parent, shares);
    }
    let mut cols = Vec::with_capacity(old.domains.len());
    for id in &old.domains {
        if let Some(children) = split.get(id.as_str()) {
            cols.push(children.clone());
        } else {
            let j = post_update.index_of(id).ok_or_else(|| MixError::UnknownDomain(id.clone()))?;
            cols.push(vec![(j, 1.0)]);
        }
    }
    let records = old
        .records
        .iter()
        .map(|r| {
            let mut mixture = vec![0.0; post_update.len()];
            for (w, targets) in r.mixture.iter().zip(&cols) {
                for &(j, share) in targets {
                    mixture[j] += w * share;
                }
            }
            SwarmRecord {
                mixture,
                scores: r.scores.clone(),
            }
        })
        .collect();
    SwarmDataset::new(post_update.ids(), old.tasks.clone(), records)
}

/// Keeps old runs that put no weight on domains a Remove or Revise touched and
/// drops those columns. Used where old runs cannot be mapped.
pub fn filter_old_swarm(old: &SwarmDataset, update: &DomainUpdate, post_update: &DomainSet) -> Result<SwarmDataset> {
    let touched: BTreeSet<&str> = update.affected.iter().map(String::as_str).collect();
    let cols: Vec<Option<usize>> = old
        .domains
        .iter()
        .map(|id| if touched.contains(id.as_str()) { None } else { post_update.index_of(id) })
        .collect();
    let records: Vec<SwarmRecord> = old
        .records
        .iter()
        .filter(|r| r.mixture.iter().zip(&old.domains).all(|(w, id)| *w == 0.0 || !touched.contains(id.as_str())))
        .map(|r| {
            let mut mixture = vec![0.0; post_update.len()];
            for (w, c) in r.mixture.iter().zip(&cols) {
                if let Some(j) = c {
                    mixture[*j] += w;
                }
            }
            SwarmRecord {
                mixture,
                scores: r.scores.clone(),
            }
        })
        .collect();
    Ok(SwarmDataset {
        domains: post_update.ids(),
        tasks: old.tasks.clone(),
        records,
    })
}

/// Fresh runs needed next to a reused pool: enough to reach `target`, and at
/// least one per domain that no pool run touches.
pub fn fresh_runs_needed(pool: &[Vec<f64>], m: usize, target: usize) -> usize {
    let uncovered = (0..m).filter(|&j| pool.iter().all(|p| p[j] == 0.0)).count();
    target.saturating_sub(pool.len()).max(uncovered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmReuseOutcome {
    pub mixture: Mixture,
    pub reused_runs: usize,
    pub fresh_runs: usize,
    /// Combined pool, for chaining into the next update.
    pub swarm: SwarmDataset,
    pub base: BaseOutcome,
}

/// Maps an old swarm onto the post-update domains, tops it up with fresh runs
/// up to `target`, and fits and solves in the full space.
pub fn swarm_reuse(
    old: &SwarmDataset,
    update: &DomainUpdate,
    post_update: &DomainSet,
    target: usize,
    cfg: &BaseConfig,
    oracle: &dyn Oracle,
) -> Result<SwarmReuseOutcome> {
    let mapped = map_old_swarm(old, update, post_update)?;
    swarm_reuse_pool(mapped, post_update, target, cfg, oracle)
}

/// As [`swarm_reuse`], starting from an already mapped pool.
pub fn swarm_reuse_pool(
    pool: SwarmDataset,
    post_update: &DomainSet,
    target: usize,
    cfg: &BaseConfig,
    oracle: &dyn Oracle,
) -> Result<SwarmReuseOutcome> {
    let mixes: Vec<Vec<f64>> = pool.records.iter().map(|r| r.mixture.clone()).collect();
    let fresh = fresh_runs_needed(&mixes, post_update.len(), target);
    let reused = pool.records.len();
    let run_cfg = BaseConfig {
        swarm_size: fresh,
        ..cfg.clone()
    };
    let base = crate::pipeline::base::run_base_pooled(post_update, pool, &run_cfg, oracle)?;
    Ok(SwarmReuseOutcome {
        mixture: base.solve.mixture.clone(),
        reused_runs: reused,
        fresh_runs: fresh,
        swarm: base.swarm.clone(),
        base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(pairs: &[(&str, u64)]) -> DomainSet {
        DomainSet::from_pairs(pairs).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn four_plan() -> ReusePlan {
        let d = set(&[("a", 1), ("b", 1), ("c", 2), ("z", 6)]);
        ReusePlan::new(
            d,
            vec!["a".into(), "b".into(), "c".into()],
            Mixture::new(vec![0.25, 0.25, 0.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn expand_examples() {
        let plan = four_plan();
        let r = CollapsedMixture {
            virtual_weights: vec![0.4],
            comp_weights: vec![0.6],
        };
        assert!(close(expand(&plan, &r).unwrap().weights(), &[0.1, 0.1, 0.2, 0.6], 1e-12));
        let r1 = CollapsedMixture {
            virtual_weights: vec![1.0],
            comp_weights: vec![0.0],
        };
        assert!(close(expand(&plan, &r1).unwrap().weights(), &[0.25, 0.25, 0.5, 0.0], 1e-12));

        let (back, residual) = collapse(&plan, &Mixture::new(vec![0.1, 0.1, 0.2, 0.6]).unwrap()).unwrap();
        assert!((back.virtual_weights[0] - 0.4).abs() < 1e-12 && residual < 1e-12);
        let (_, residual) = collapse(&plan, &Mixture::uniform(4)).unwrap();
        assert!(residual > 0.0);
    }

    #[test]
    fn caps_examples() {
        let d = set(&[("a", 100), ("b", 100), ("z", 1_000_000)]);
        let plan = ReusePlan::new(d, vec!["a".into(), "b".into()], Mixture::uniform(2)).unwrap();
        let caps = collapsed_caps(&plan, &RepetitionBudget::new(4.0, 1000).unwrap()).unwrap();
        assert_eq!(plan.collapsed_domains().unwrap().ids(), vec!["(fixed)", "z"]);
        assert!((caps[0] - 0.8).abs() < 1e-12);
        assert_eq!(caps[1], 1.0);

        let d = set(&[("a", 100), ("b", 1), ("z", 1_000_000)]);
        let plan = ReusePlan::new(d, vec!["a".into(), "b".into()], Mixture::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let caps = collapsed_caps(&plan, &RepetitionBudget::new(4.0, 1000).unwrap()).unwrap();
        assert!((caps[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn remove_examples() {
        let d = set(&[("a", 1), ("b", 1), ("c", 2)]);
        let p = Mixture::new(vec![0.25, 0.25, 0.5]).unwrap();
        let (ids, q) = renormalize_remove(&d, &p, &["a".into()]).unwrap();
        assert_eq!(ids, vec!["b", "c"]);
        assert!(close(q.weights(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
        let z = Mixture::new(vec![0.0, 0.5, 0.5]).unwrap();
        assert!(close(renormalize_remove(&d, &z, &["a".into()]).unwrap().1.weights(), &[0.5, 0.5], 0.0));
        let (_, one) = renormalize_remove(&d, &p, &["a".into(), "b".into()]).unwrap();
        assert_eq!(one.weights(), &[1.0]);
        assert!(matches!(
            renormalize_remove(&d, &z, &["b".into(), "c".into()]),
            Err(MixError::AllMassRemoved)
        ));
    }

    #[test]
    fn swarm_mapping_examples() {
        let old = SwarmDataset::new(
            vec!["x".into(), "y".into()],
            vec!["t".into()],
            vec![SwarmRecord {
                mixture: vec![0.4, 0.6],
                scores: vec![1.0],
            }],
        )
        .unwrap();
        let part = DomainUpdate::partition("x", vec![Domain::new("x1", 150), Domain::new("x2", 150)]);
        let post = set(&[("x1", 150), ("x2", 150), ("y", 100)]);
        let mapped = map_old_swarm(&old, &part, &post).unwrap();
        assert!(close(&mapped.records[0].mixture, &[0.2, 0.2, 0.6], 1e-15));

        let add = DomainUpdate::add(vec![Domain::new("a1", 5), Domain::new("a2", 5)]);
        let post = set(&[("x", 1), ("y", 1), ("a1", 5), ("a2", 5)]);
        let mapped = map_old_swarm(&old, &add, &post).unwrap();
        // canonical order is a1, a2, x, y
        assert!(close(&mapped.records[0].mixture, &[0.0, 0.0, 0.4, 0.6], 0.0));

        let rev = DomainUpdate::revise("x", Domain::new("x", 9));
        assert!(matches!(
            map_old_swarm(&old, &rev, &set(&[("x", 9), ("y", 1)])),
            Err(MixError::UnsupportedUpdateKind(_))
        ));
    }

    #[test]
    fn fresh_run_rule() {
        let pool = vec![vec![0.5, 0.5, 0.0], vec![0.2, 0.8, 0.0]];
        assert_eq!(fresh_runs_needed(&pool, 3, 4), 2);
        assert_eq!(fresh_runs_needed(&pool, 3, 2), 1);
        assert_eq!(fresh_runs_needed(&[], 3, 4), 4);
    }

    #[test]
    fn collapsed_truth_agrees_with_full_truth() {
        let plan = four_plan();
        let ids: Vec<String> = plan.post_update.ids();
        let g = GroundTruthModel::random(3, &ids, 0.0, 4).unwrap();
        let cg = plan.collapsed_truth(&g).unwrap();
        let r = CollapsedMixture {
            virtual_weights: vec![0.35],
            comp_weights: vec![0.65],
        };
        let q = expand(&plan, &r).unwrap();
        let rv = Mixture::new(plan.to_collapsed_vector(&r).unwrap()).unwrap();
        let a = crate::oracle::evaluate_truth(&g, &q, 0).unwrap();
        let b = crate::oracle::evaluate_truth(&cg, &rv, 0).unwrap();
        assert!(close(&a, &b, 1e-14));
    }

    #[test]
    fn plan_validation() {
        let d = set(&[("a", 1), ("b", 1)]);
        assert!(ReusePlan::new(d.clone(), vec![], Mixture::uniform(1)).is_err());
        assert!(ReusePlan::new(d.clone(), vec!["q".into()], Mixture::uniform(1)).is_err());
        assert!(ReusePlan::new(d, vec!["a".into()], Mixture::uniform(2)).is_err());
    }

    fn arb_plan() -> impl Strategy<Value = (ReusePlan, CollapsedMixture, RepetitionBudget)> {
        (2usize..5, 1usize..4, prop::collection::vec(1u64..1000, 8), prop::collection::vec(0.01f64..1.0, 16))
            .prop_map(|(nf, nc, toks, raw)| {
                let m = nf + nc;
                let d = DomainSet::new((0..m).map(|j| Domain::new(format!("d{j}"), toks[j % 8] * 10)).collect()).unwrap();
                let fix: Vec<String> = (0..nf).map(|j| format!("d{j}")).collect();
                let ratios = Mixture::new(raw[..nf].to_vec()).unwrap();
                let plan = ReusePlan::new(d, fix, ratios).unwrap();
                let w = Mixture::new(raw[nf..nf + nc + 1].to_vec()).unwrap().into_weights();
                let r = CollapsedMixture {
                    virtual_weights: vec![w[0]],
                    comp_weights: w[1..].to_vec(),
                };
                (plan, r, RepetitionBudget::new(2.0, 5000).unwrap())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn expand_collapse_round_trip((plan, r, _b) in arb_plan()) {
            let q = expand(&plan, &r).unwrap();
            let (back, residual) = collapse(&plan, &q).unwrap();
            prop_assert!(residual < 1e-12);
            prop_assert!((back.virtual_weights[0] - r.virtual_weights[0]).abs() < 1e-12);
            for (a, b) in back.comp_weights.iter().zip(&r.comp_weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn caps_map_both_ways((plan, r, b) in arb_plan()) {
            let q = expand(&plan, &r).unwrap();
            let full_ok = plan
                .post_update
                .domains()
                .iter()
                .zip(q.weights())
                .all(|(d, w)| *w <= b.cap_for(d.tokens) + 1e-12);
            let caps = plan.to_collapsed_vector(&CollapsedMixture {
                virtual_weights: vec![plan.groups[0]
                    .ids
                    .iter()
                    .zip(plan.groups[0].ratios.weights())
                    .map(|(id, w)| b.cap_for(plan.post_update.get(id).unwrap().tokens) / w)
                    .fold(f64::INFINITY, f64::min)
                    .min(1.0)],
                comp_weights: plan.d_comp.iter().map(|id| b.cap_for(plan.post_update.get(id).unwrap().tokens)).collect(),
            }).unwrap();
            let rv = plan.to_collapsed_vector(&r).unwrap();
            let collapsed_ok = rv.iter().zip(&caps).all(|(w, u)| *w <= u + 1e-12);
            prop_assert_eq!(full_ok, collapsed_ok);
        }
    }
}
