//! Bundled reference data: the 64-domain mixtures from the published
//! comparison, the domain token counts, and the five-update development chain.

use serde::Deserialize;

use crate::domain::DomainSet;
use crate::error::Result;
use crate::pipeline::devcycle::DevChain;

const TABLE_CSV: &str = include_str!("../fixtures/table11_mixtures.csv");
const TOKENS_JSON: &str = include_str!("../fixtures/domain_tokens.json");
const CHAIN_JSON: &str = include_str!("../fixtures/devcycle_chain.json");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub domain: String,
    pub natural: f64,
    pub full_recompute: f64,
    pub partial_reuse: f64,
}

/// Reference mixtures over the final 64 domains, sorted by domain id.
pub fn reference_mixtures() -> Result<Vec<ReferenceRow>> {
    let mut rd = csv::Reader::from_reader(TABLE_CSV.as_bytes());
    let mut rows: Vec<ReferenceRow> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by(|a, b| a.domain.cmp(&b.domain));
    Ok(rows)
}

/// Token counts for every domain that appears anywhere in the chain.
pub fn domain_tokens() -> Result<DomainSet> {
    Ok(serde_json::from_str(TOKENS_JSON)?)
}

pub fn devcycle_chain() -> Result<DevChain> {
    Ok(serde_json::from_str(CHAIN_JSON)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_columns_are_mixtures() {
        let rows = reference_mixtures().unwrap();
        assert_eq!(rows.len(), 64);
        for col in [
            rows.iter().map(|r| r.natural).sum::<f64>(),
            rows.iter().map(|r| r.full_recompute).sum::<f64>(),
            rows.iter().map(|r| r.partial_reuse).sum::<f64>(),
        ] {
            assert!((col - 1.0).abs() < 1e-3, "{col}");
        }
    }

    #[test]
    fn chain_ends_on_reference_domains() {
        let chain = devcycle_chain().unwrap();
        let last = chain.domain_sets().unwrap().pop().unwrap();
        let ids: Vec<String> = reference_mixtures().unwrap().into_iter().map(|r| r.domain).collect();
        assert_eq!(last.ids(), ids);
        assert_eq!(chain.initial.len(), 24);
        assert_eq!(domain_tokens().unwrap().len(), 65);
    }
}
