//! Offline search engine: catalog, index and ranking parameters bundled
//! together.

use crate::catalog::Catalog;
use crate::error::Result;
use crate::index::{build_index, retrieve, Bm25Params, InvertedIndex, RecallSet};
use crate::relevance::{aggregate_relevance, RelevanceScore};

#[derive(Debug, Clone)]
pub struct SearchEngine {
    pub catalog: Catalog,
    pub index: InvertedIndex,
    pub bm25: Bm25Params,
    /// Depth `k` of every recall set the rewards and metrics look at.
    pub recall_depth: usize,
}

impl SearchEngine {
    pub fn new(catalog: Catalog, bm25: Bm25Params, recall_depth: usize) -> Result<Self> {
        let index = build_index(&catalog)?;
        Ok(Self {
            catalog,
            index,
            bm25,
            recall_depth: recall_depth.max(1),
        })
    }

    pub fn retrieve(&self, text: &str) -> RecallSet {
        retrieve(&self.index, &self.bm25, text, self.recall_depth)
    }

    pub fn retrieve_k(&self, text: &str, k: usize) -> RecallSet {
        retrieve(&self.index, &self.bm25, text, k.max(1))
    }

    pub fn aggregate_relevance(&self, query: &str, recall: &RecallSet, m: usize) -> RelevanceScore {
        aggregate_relevance(&self.catalog, query, recall, m)
    }
}
