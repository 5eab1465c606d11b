//! Inverted index with BM25 ranking over product titles.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{tokenize, Catalog, ProductId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    /// Lucene-style idf, always positive.
    pub fn idf(&self, doc_count: usize, df: usize) -> f64 {
        let n = doc_count as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Saturating term-frequency component.
    pub fn tf_norm(&self, tf: u32, doc_len: u32, avg_doc_len: f64) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * doc_len as f64 / avg_doc_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub postings: BTreeMap<String, Vec<(ProductId, u32)>>,
    pub doc_lengths: BTreeMap<ProductId, u32>,
    pub avg_doc_length: f64,
}

pub fn build_index(catalog: &Catalog) -> Result<InvertedIndex> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut postings: BTreeMap<String, BTreeMap<ProductId, u32>> = BTreeMap::new();
    let mut doc_lengths = BTreeMap::new();
    let mut total = 0u64;
    for p in &catalog.products {
        doc_lengths.insert(p.id, p.tokens.len() as u32);
        total += p.tokens.len() as u64;
        for tok in &p.tokens {
            *postings.entry(tok.clone()).or_default().entry(p.id).or_insert(0) += 1;
        }
    }
    let postings = postings
        .into_iter()
        .map(|(tok, per_doc)| (tok, per_doc.into_iter().collect()))
        .collect();
    Ok(InvertedIndex {
        postings,
        avg_doc_length: total as f64 / catalog.len() as f64,
        doc_lengths,
    })
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallItem {
    pub id: ProductId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub query_text: String,
    pub items: Vec<RecallItem>,
    pub k: usize,
}

impl RecallSet {
    pub fn empty(query_text: &str, k: usize) -> Self {
        Self {
            query_text: query_text.to_string(),
            items: Vec::new(),
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ProductId> + '_ {
        self.items.iter().map(|i| i.id)
    }

    pub fn id_set(&self) -> BTreeSet<ProductId> {
        self.ids().collect()
    }

    pub fn rank_of(&self, id: ProductId) -> Option<usize> {
        self.items.iter().find(|i| i.id == id).map(|i| i.rank)
    }

    pub fn contains(&self, id: ProductId) -> bool {
        self.items.iter().any(|i| i.id == id)
    }

    /// Orders `(id, score)` pairs by descending score then ascending id,
    /// truncates to `k` and assigns ranks.
    pub fn from_scores(query_text: &str, mut scored: Vec<(ProductId, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        let items = scored
            .into_iter()
            .enumerate()
            .map(|(i, (id, score))| RecallItem { id, score, rank: i + 1 })
            .collect();
        Self {
            query_text: query_text.to_string(),
            items,
            k,
        }
    }
}

/// Distinct tokens in first-occurrence order.
pub(crate) fn distinct_tokens(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(text).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

/// Any-match BM25 retrieval: every product sharing at least one token with
/// the query is a candidate.
pub fn retrieve(index: &InvertedIndex, params: &Bm25Params, query_text: &str, k: usize) -> RecallSet {
    let mut scores: BTreeMap<ProductId, f64> = BTreeMap::new();
    let n = index.doc_count();
    for tok in distinct_tokens(query_text) {
        let Some(list) = index.postings.get(&tok) else {
            continue;
        };
        let idf = params.idf(n, list.len());
        for &(id, tf) in list {
            let dl = index.doc_lengths[&id];
            *scores.entry(id).or_insert(0.0) += idf * params.tf_norm(tf, dl, index.avg_doc_length);
        }
    }
    RecallSet::from_scores(query_text, scores.into_iter().collect(), k)
}
