//! Benchmark inputs shared by the criterion harnesses.

use mixopt_core::{Domain, DomainSet, GroundTruthModel};

/// `m` equally sized domains named `d00`, `d01`, ...
pub fn domains(m: usize) -> DomainSet {
    DomainSet::new((0..m).map(|j| Domain::new(format!("d{j:02}"), 1_000_000)).collect())
        .expect("nonempty")
}

pub fn truth(n: usize, m: usize, seed: u64) -> GroundTruthModel {
    GroundTruthModel::random(n, &domains(m).ids(), 0.0, seed).expect("valid truth")
}
