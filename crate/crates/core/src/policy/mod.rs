//! The rewrite policy: vocabulary, parameters, recurrent model, decoding and
//! checkpoints.

pub mod checkpoint;
pub mod decode;
pub mod model;
pub mod params;
pub mod vocab;

pub use decode::{beam_search, greedy, parse_output, PolicyScorer, RewriteOutput, SampleSource, SequenceSample};
pub use model::{backward, value_and_backward, Grammar, Loss, LossGraph, LossTerm};
pub use params::PolicyParams;
pub use vocab::{TokenId, Vocab};

use crate::catalog::Catalog;
use crate::dataset::Tag;
use crate::error::{Error, Result};

/// A vocabulary, its parameters and the grammar they decode under.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub vocab: Vocab,
    pub params: PolicyParams,
    pub grammar: Grammar,
}

/// Vocabulary of every title token and synonym in the catalog.
pub fn catalog_vocab(catalog: &Catalog) -> Vocab {
    Vocab::from_words(catalog.all_tokens())
}

/// Training target: rewrite, SEP, then the tag under the tagged grammar.
pub fn target_tokens(vocab: &Vocab, grammar: Grammar, rewrite: &str, tag: Option<Tag>) -> Result<Vec<TokenId>> {
    let ids = vocab.encode(rewrite);
    if ids.is_empty() {
        return Err(Error::EmptyRewrite);
    }
    if grammar == Grammar::Tagged && tag.is_none() {
        return Err(Error::InvalidArgument("tagged grammar needs a tag target".into()));
    }
    Ok(decode::render_output(&ids, tag, grammar))
}

impl Policy {
    pub fn new(vocab: Vocab, hidden: usize, grammar: Grammar, seed: u64, init_scale: f64) -> Self {
        let params = PolicyParams::random(vocab.len(), hidden, seed, init_scale);
        Self { vocab, params, grammar }
    }

    pub fn with_params(&self, params: PolicyParams) -> Self {
        Self {
            vocab: self.vocab.clone(),
            params,
            grammar: self.grammar,
        }
    }

    pub fn with_grammar(&self, grammar: Grammar) -> Self {
        Self {
            grammar,
            ..self.clone()
        }
    }

    pub fn prompt(&self, query: &str) -> Vec<TokenId> {
        self.vocab.prompt(query)
    }

    /// Training target: rewrite, SEP, then the tag for tagged policies.
    pub fn target_tokens(&self, rewrite: &str, tag: Option<Tag>) -> Result<Vec<TokenId>> {
        target_tokens(&self.vocab, self.grammar, rewrite, tag)
    }

    pub fn sequence_log_prob(&self, query: &str, tokens: &[TokenId], truncated: bool) -> Result<f64> {
        model::sequence_log_prob(&self.params, self.grammar, &self.prompt(query), tokens, truncated)
    }

    pub fn tag_probability(&self, query: &str, rewrite: &str) -> Result<(f64, f64)> {
        self.params.tag_probability(&self.prompt(query), &self.vocab.encode(rewrite))
    }

    pub fn beam_search(&self, query: &str, beam_size: usize, max_len: usize) -> Result<Vec<SequenceSample>> {
        let scorer = PolicyScorer::new(&self.params, self.grammar, &self.prompt(query))?;
        Ok(beam_search(&scorer, beam_size, max_len))
    }

    pub fn parse(&self, sample: &SequenceSample) -> RewriteOutput {
        parse_output(sample, &self.vocab, self.grammar)
    }

    /// Beam candidates parsed into rewrite outputs, best first.
    pub fn decode(&self, query: &str, beam_size: usize, max_len: usize) -> Result<Vec<(SequenceSample, RewriteOutput)>> {
        Ok(self
            .beam_search(query, beam_size, max_len)?
            .into_iter()
            .map(|s| {
                let out = self.parse(&s);
                (s, out)
            })
            .collect())
    }
}
