//! Domain sets, mixtures over them, repetition budgets and the four
//! domain-update operators (add, remove, partition, revise).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{MixError, Result};

/// Weights may drift this far from summing to one before a mixture is rejected.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Relative token slack tolerated when a domain is partitioned.
pub const PARTITION_SLACK: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: String,
    pub tokens: u64,
}

impl Domain {
    pub fn new(id: impl Into<String>, tokens: u64) -> Self {
        Self { id: id.into(), tokens }
    }
}

#[derive(Deserialize)]
struct RawDomainSet {
    #[serde(default)]
    version: u64,
    domains: Vec<Domain>,
}

/// Named domains with token counts, kept in lexicographic id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDomainSet")]
pub struct DomainSet {
    version: u64,
    domains: Vec<Domain>,
}

impl TryFrom<RawDomainSet> for DomainSet {
    type Error = MixError;

    fn try_from(raw: RawDomainSet) -> Result<Self> {
        DomainSet::with_version(raw.domains, raw.version)
    }
}

impl DomainSet {
    pub fn new(domains: Vec<Domain>) -> Result<Self> {
        Self::with_version(domains, 1)
    }

    pub fn with_version(mut domains: Vec<Domain>, version: u64) -> Result<Self> {
        if domains.is_empty() {
            return Err(MixError::InvalidDomainSet("no domains".into()));
        }
        domains.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in domains.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(MixError::IdCollision(pair[0].id.clone()));
            }
        }
        if domains.iter().any(|d| d.id.is_empty()) {
            return Err(MixError::InvalidDomainSet("empty domain id".into()));
        }
        if domains.iter().all(|d| d.tokens == 0) {
            return Err(MixError::EmptyDomainSet);
        }
        Ok(Self { version, domains })
    }

    /// Convenience constructor from `(id, tokens)` pairs.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, u64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(id, t)| Domain::new(id.as_ref(), *t))
                .collect(),
        )
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.id.clone()).collect()
    }

    pub fn tokens(&self) -> Vec<u64> {
        self.domains.iter().map(|d| d.tokens).collect()
    }

    pub fn total_tokens(&self) -> u128 {
        self.domains.iter().map(|d| d.tokens as u128).sum()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.domains.binary_search_by(|d| d.id.as_str().cmp(id)).ok()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index_of(id).is_some()
    }

    pub fn get(&self, id: &str) -> Option<&Domain> {
        self.index_of(id).map(|i| &self.domains[i])
    }

    /// Indices for `ids`, failing on the first unknown id.
    pub fn indices_of<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(id.as_ref())
                    .ok_or_else(|| MixError::UnknownDomain(id.as_ref().to_string()))
            })
            .collect()
    }
}

/// A probability vector. Construction renormalizes; the domain set it lives
/// on is tracked by whoever holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Mixture {
    weights: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Mixture {
    type Error = MixError;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Mixture::new(w)
    }
}

impl From<Mixture> for Vec<f64> {
    fn from(m: Mixture) -> Self {
        m.weights
    }
}

impl Mixture {
    /// Validates and renormalizes. Entries within -1e-12 of zero are clamped.
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MixError::InvalidMixture("empty weight vector".into()));
        }
        for w in weights.iter_mut() {
            if !w.is_finite() || *w < -1e-12 {
                return Err(MixError::InvalidMixture(format!("weight {w} is not a valid mass")));
            }
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(MixError::InvalidMixture("weights sum to zero".into()));
        }
        if (sum - 1.0).abs() > 0.0 {
            weights.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(Self { weights })
    }

    /// Like [`Mixture::new`] but also checks the length against `domains`.
    pub fn over(domains: &DomainSet, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != domains.len() {
            return Err(MixError::DimensionMismatch {
                expected: domains.len(),
                got: weights.len(),
            });
        }
        Self::new(weights)
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weights restricted to `indices`, renormalized. `None` when that mass is zero.
    pub fn restrict(&self, indices: &[usize]) -> Option<Mixture> {
        let w: Vec<f64> = indices.iter().map(|&i| self.weights[i]).collect();
        Mixture::new(w).ok()
    }
}

/// A mixture paired with the ids of the domains it weights; the on-disk form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMixture {
    pub domains: Vec<String>,
    pub weights: Vec<f64>,
}

impl NamedMixture {
    pub fn new(domains: &DomainSet, mixture: &Mixture) -> Self {
        Self {
            domains: domains.ids(),
            weights: mixture.weights().to_vec(),
        }
    }

    /// Aligns the stored weights to `domains`; every id must be present.
    pub fn aligned_to(&self, domains: &DomainSet) -> Result<Mixture> {
        if self.domains.len() != self.weights.len() {
            return Err(MixError::LengthMismatch(self.domains.len(), self.weights.len()));
        }
        let mut w = vec![f64::NAN; domains.len()];
        for (id, &x) in self.domains.iter().zip(&self.weights) {
            let i = domains
                .index_of(id)
                .ok_or_else(|| MixError::UnknownDomain(id.clone()))?;
            w[i] = x;
        }
        if let Some(i) = w.iter().position(|x| x.is_nan()) {
            return Err(MixError::UnknownDomain(domains.domains()[i].id.clone()));
        }
        Mixture::new(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Add,
    Remove,
    Partition,
    Revise,
}

impl std::fmt::Display for UpdateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            UpdateKind::Add => "add",
            UpdateKind::Remove => "remove",
            UpdateKind::Partition => "partition",
            UpdateKind::Revise => "revise",
        };
        f.write_str(s)
    }
}

/// One of the four domain-update operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainUpdate {
    pub kind: UpdateKind,
    #[serde(default)]
    pub affected: Vec<String>,
    #[serde(default)]
    pub introduced: Vec<Domain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_map: Option<BTreeMap<String, Vec<String>>>,
}

impl DomainUpdate {
    pub fn add(introduced: Vec<Domain>) -> Self {
        Self {
            kind: UpdateKind::Add,
            affected: vec![],
            introduced,
            partition_map: None,
        }
    }

    pub fn remove<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Self {
        Self {
            kind: UpdateKind::Remove,
            affected: ids.into_iter().map(Into::into).collect(),
            introduced: vec![],
            partition_map: None,
        }
    }

    pub fn partition(parent: impl Into<String>, children: Vec<Domain>) -> Self {
        let parent = parent.into();
        let map = BTreeMap::from([(
            parent.clone(),
            children.iter().map(|c| c.id.clone()).collect(),
        )]);
        Self {
            kind: UpdateKind::Partition,
            affected: vec![parent],
            introduced: children,
            partition_map: Some(map),
        }
    }

    pub fn revise(old: impl Into<String>, new: Domain) -> Self {
        Self {
            kind: UpdateKind::Revise,
            affected: vec![old.into()],
            introduced: vec![new],
            partition_map: None,
        }
    }

    /// Checks the per-kind shape rules (not membership in any domain set).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MixError::InvalidUpdate(format!("{}: {msg}", self.kind)));
        match self.kind {
            UpdateKind::Add => {
                if !self.affected.is_empty() {
                    return bad("affected must be empty");
                }
                if self.introduced.is_empty() {
                    return bad("introduced must be nonempty");
                }
            }
            UpdateKind::Remove => {
                if self.affected.is_empty() {
                    return bad("affected must be nonempty");
                }
                if !self.introduced.is_empty() {
                    return bad("introduced must be empty");
                }
            }
            UpdateKind::Partition => {
                if self.affected.len() != 1 {
                    return bad("exactly one domain is partitioned");
                }
                if self.introduced.is_empty() {
                    return bad("partition needs children");
                }
                if let Some(map) = &self.partition_map {
                    let children: BTreeSet<&str> =
                        self.introduced.iter().map(|d| d.id.as_str()).collect();
                    let listed = map.get(&self.affected[0]);
                    let ok = map.len() == 1
                        && listed.is_some_and(|l| {
                            l.len() == children.len()
                                && l.iter().all(|c| children.contains(c.as_str()))
                        });
                    if !ok {
                        return bad("partition_map must list exactly the introduced children");
                    }
                }
            }
            UpdateKind::Revise => {
                if self.affected.len() != 1 || self.introduced.len() != 1 {
                    return bad("exactly one affected and one introduced domain");
                }
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.introduced {
            if !seen.insert(d.id.as_str()) {
                return Err(MixError::IdCollision(d.id.clone()));
            }
        }
        Ok(())
    }
}

/// Result of [`apply_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedUpdate {
    pub domains: DomainSet,
    /// Ids present before and after, untouched by the update.
    pub unaffected: Vec<String>,
    /// Relative token slack of a partition, when the update is one.
    pub partition_slack: Option<f64>,
}

/// Applies `u` to `d`, bumping the version.
pub fn apply_update(d: &DomainSet, u: &DomainUpdate) -> Result<AppliedUpdate> {
    u.validate()?;
    for id in &u.affected {
        if !d.contains(id) {
            return Err(MixError::UnknownDomain(id.clone()));
        }
    }
    let affected: BTreeSet<&str> = u.affected.iter().map(String::as_str).collect();
    let survivors: Vec<Domain> = d
        .domains()
        .iter()
        .filter(|dom| !affected.contains(dom.id.as_str()))
        .cloned()
        .collect();
    let unaffected: Vec<String> = survivors.iter().map(|s| s.id.clone()).collect();
    for intro in &u.introduced {
        if unaffected.binary_search(&intro.id).is_ok() {
            return Err(MixError::IdCollision(intro.id.clone()));
        }
    }

    let mut partition_slack = None;
    if u.kind == UpdateKind::Partition {
        let parent = d.get(&u.affected[0]).expect("checked above");
        let children: u128 = u.introduced.iter().map(|c| c.tokens as u128).sum();
        let slack = if parent.tokens == 0 {
            if children == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (children as f64 - parent.tokens as f64).abs() / parent.tokens as f64
        };
        if slack > PARTITION_SLACK {
            return Err(MixError::PartitionTokenMismatch {
                parent: parent.id.clone(),
                slack,
            });
        }
        partition_slack = Some(slack);
    }

    let mut next = survivors;
    next.extend(u.introduced.iter().cloned());
    if next.is_empty() {
        return Err(MixError::InvalidUpdate("update removes every domain".into()));
    }
    let domains = DomainSet::with_version(next, d.version() + 1)?;
    Ok(AppliedUpdate {
        domains,
        unaffected,
        partition_slack,
    })
}

/// Mixture proportional to token counts.
pub fn natural_distribution(d: &DomainSet) -> Result<Mixture> {
    let total = d.total_tokens();
    if total == 0 {
        return Err(MixError::EmptyDomainSet);
    }
    let total = total as f64;
    Mixture::new(d.domains().iter().map(|x| x.tokens as f64 / total).collect())
}

/// Caps on how often any domain may be repeated: `p_j <= k N_j / R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepetitionBudget {
    /// Maximum number of epochs over any one domain.
    pub k: f64,
    /// Requested training tokens.
    pub requested_tokens: u64,
}

impl RepetitionBudget {
    pub fn new(k: f64, requested_tokens: u64) -> Result<Self> {
        if !(k >= 1.0 && k.is_finite()) {
            return Err(MixError::InvalidConfig(format!("repetition factor {k} must be >= 1")));
        }
        if requested_tokens == 0 {
            return Err(MixError::InvalidConfig("requested tokens must be positive".into()));
        }
        Ok(Self { k, requested_tokens })
    }

    /// `min(1, k N / R)` for a single token count.
    pub fn cap_for(&self, tokens: u64) -> f64 {
        (self.k * tokens as f64 / self.requested_tokens as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionCaps {
    pub caps: Vec<f64>,
    /// Whether any mixture can satisfy every cap at once.
    pub feasible: bool,
}

pub fn repetition_caps(d: &DomainSet, b: &RepetitionBudget) -> RepetitionCaps {
    let caps: Vec<f64> = d.domains().iter().map(|x| b.cap_for(x.tokens)).collect();
    let feasible = caps_feasible(&caps);
    RepetitionCaps { caps, feasible }
}

pub(crate) fn caps_feasible(caps: &[f64]) -> bool {
    caps.iter().sum::<f64>() >= 1.0 - 1e-12
}
