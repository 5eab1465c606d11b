//! Deterministic relevance scorer: synonym-aware token-overlap F1 between a
//! query and a product title, and the top-M product aggregation over a
//! recall set.

use std::collections::BTreeSet;

use crate::catalog::{tokenize, Catalog, Product, SynonymTable};
use crate::index::RecallSet;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub const ZERO: Self = Self(0.0);

    pub fn new(value: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value), "relevance {value} outside [0, 1]");
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// F1 of synonym-expanded token overlap.
pub fn token_f1(query: &[String], title: &[String], synonyms: &SynonymTable) -> RelevanceScore {
    if query.is_empty() || title.is_empty() {
        return RelevanceScore::ZERO;
    }
    let q_classes: BTreeSet<&str> = query.iter().map(|t| synonyms.class_of(t)).collect();
    let t_classes: BTreeSet<&str> = title.iter().map(|t| synonyms.class_of(t)).collect();
    let matched_q = query.iter().filter(|t| t_classes.contains(synonyms.class_of(t))).count();
    let matched_t = title.iter().filter(|t| q_classes.contains(synonyms.class_of(t))).count();
    let precision = matched_q as f64 / query.len() as f64;
    let recall = matched_t as f64 / title.len() as f64;
    if precision + recall == 0.0 {
        return RelevanceScore::ZERO;
    }
    RelevanceScore::new(2.0 * precision * recall / (precision + recall))
}

pub fn relev(catalog: &Catalog, query_text: &str, product: &Product) -> RelevanceScore {
    token_f1(&tokenize(query_text), &product.tokens, &catalog.synonyms)
}

/// Product of `relev` over the top `min(m, |recall_set|)` items; an empty
/// recall set scores zero.
pub fn aggregate_relevance(catalog: &Catalog, query_text: &str, recall_set: &RecallSet, m: usize) -> RelevanceScore {
    if recall_set.is_empty() || m == 0 {
        return RelevanceScore::ZERO;
    }
    let query = tokenize(query_text);
    let mut acc = 1.0;
    for item in recall_set.items.iter().take(m) {
        let score = catalog
            .product(item.id)
            .map(|p| token_f1(&query, &p.tokens, &catalog.synonyms).value())
            .unwrap_or(0.0);
        acc *= score;
    }
    RelevanceScore::new(acc)
}
