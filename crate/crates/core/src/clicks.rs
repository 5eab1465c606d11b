//! Simulated user clicks: position-biased Bernoulli draws weighted by
//! relevance.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{normalize, Catalog, ProductId};
use crate::index::RecallSet;
use crate::relevance::relev;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub id: ProductId,
    /// Rank of the clicked item in the recall set it was drawn from (>= 1).
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSet {
    pub query_text: String,
    pub clicks: Vec<Click>,
}

impl ClickSet {
    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn ids(&self) -> BTreeSet<ProductId> {
        self.clicks.iter().map(|c| c.id).collect()
    }
}

/// Click probability at rank `r` is `relev(query, product) / r`.
pub fn simulate_clicks(catalog: &Catalog, query_text: &str, recall_set: &RecallSet, seed: u64) -> ClickSet {
    let mut rng = seed::keyed(seed, "clicks", &normalize(query_text));
    let mut clicks = Vec::new();
    for item in &recall_set.items {
        let Some(product) = catalog.product(item.id) else {
            continue;
        };
        let p = relev(catalog, query_text, product).value() / item.rank as f64;
        // always draw so the stream position does not depend on p
        let u: f64 = rng.gen();
        if u < p {
            clicks.push(Click {
                id: item.id,
                position: item.rank,
            });
        }
    }
    ClickSet {
        query_text: query_text.to_string(),
        clicks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, CatalogConfig};
    use crate::index::{build_index, retrieve, Bm25Params};

    #[test]
    fn empty_recall_gives_no_clicks() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        let c = simulate_clicks(&cat, "kappa bag", &RecallSet::empty("kappa bag", 10), 3);
        assert!(c.is_empty());
    }

    #[test]
    fn zero_relevance_gives_no_clicks() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        let idx = build_index(&cat).unwrap();
        // recall set for one query, clicks judged against an unrelated query
        let rs = retrieve(&idx, &Bm25Params::default(), "kappa bag", 10);
        for seed in 0..20 {
            assert!(simulate_clicks(&cat, "zzz qqq", &rs, seed).is_empty());
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        let idx = build_index(&cat).unwrap();
        let rs = retrieve(&idx, &Bm25Params::default(), "kappa bag", 20);
        let a = simulate_clicks(&cat, "kappa bag", &rs, 5);
        assert_eq!(a, simulate_clicks(&cat, "kappa bag", &rs, 5));
        let ids = a.ids();
        assert_eq!(ids.len(), a.len());
        let positions: BTreeSet<usize> = a.clicks.iter().map(|c| c.position).collect();
        assert_eq!(positions.len(), a.len());
        for c in &a.clicks {
            assert_eq!(rs.rank_of(c.id), Some(c.position));
        }
        // over many seeds the head position is clicked at least sometimes
        let head = (0..50).filter(|s| simulate_clicks(&cat, "kappa bag", &rs, *s).clicks.iter().any(|c| c.position == 1)).count();
        assert!(head > 10);
    }
}
