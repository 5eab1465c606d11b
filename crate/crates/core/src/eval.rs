//! Offline metrics and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::ProductId;
use crate::dataset::{RecallEvalRecord, RlRecord, Tag, TaggingEvalRecord};
use crate::engine::SearchEngine;
use crate::error::{Error, Result};
use crate::policy::{Grammar, Policy};
use crate::reward::RewardConfig;
use crate::rl::{train_grpo, RlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Beam width used to decode candidates.
    pub beam_size: usize,
    /// Rewrites kept per query after tag filtering.
    pub rewrite_count: usize,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            rewrite_count: 3,
            max_len: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.rewrite_count == 0 {
            return Err(Error::Config("eval.beam_size and eval.rewrite_count must be >= 1".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("eval.max_len must be >= 3".into()));
        }
        Ok(())
    }
}

/// Predicted tag: argmax of the tag distribution, ties to irrelevant.
pub fn predicted_tag(policy: &Policy, query: &str, rewrite: &str) -> Result<Tag> {
    let (p0, p1) = policy.tag_probability(query, rewrite)?;
    Ok(Tag::from_indicator(p1 > p0))
}

pub fn tagging_accuracy(policy: &Policy, records: &[TaggingEvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty tagging dataset".into()));
    }
    let mut correct = 0usize;
    for r in records {
        if predicted_tag(policy, &r.query, &r.rewrite)? == r.gold_tag {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Decoded rewrites that survive serving-style filtering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Survivors {
    /// Best first, distinct, at most `rewrite_count`.
    pub rewrites: Vec<String>,
    pub malformed: usize,
    pub decoded: usize,
}

/// Beam candidates minus malformed and tag-0 outputs (rewrite-only policies
/// have no tag to filter on), deduplicated, truncated to `rewrite_count`.
///
/// A rewrite can sit in the beam once per tag. Only its first, best-scoring
/// occurrence counts, and that one carries the argmax tag.
pub fn surviving_rewrites(policy: &Policy, query: &str, config: &EvalConfig) -> Result<Survivors> {
    let mut out = Survivors::default();
    let mut seen = BTreeSet::new();
    for (_, o) in policy.decode(query, config.beam_size, config.max_len)? {
        out.decoded += 1;
        if !o.well_formed {
            out.malformed += 1;
            continue;
        }
        if !seen.insert(o.rewrite.clone()) {
            continue;
        }
        let keep = policy.grammar == Grammar::RewriteOnly || o.tag == Some(Tag::Relevant);
        if keep && out.rewrites.len() < config.rewrite_count {
            out.rewrites.push(o.rewrite);
        }
    }
    Ok(out)
}

/// Union of the recall sets of `rewrites`.
pub fn union_recall(engine: &SearchEngine, rewrites: &[String]) -> BTreeSet<ProductId> {
    rewrites.iter().flat_map(|r| engine.retrieve(r).ids().collect::<Vec<_>>()).collect()
}

/// Hit rate of each record's clicked product in the union of its surviving
/// rewrites' recall sets.
pub fn recall_rate(
    policy: &Policy,
    records: &[RecallEvalRecord],
    engine: &SearchEngine,
    config: &EvalConfig,
) -> Result<f64> {
    let mut cache = BTreeMap::new();
    recall_rate_cached(policy, records, engine, config, &mut cache)
}

fn survivors_for<'c>(
    policy: &Policy,
    query: &str,
    config: &EvalConfig,
    cache: &'c mut BTreeMap<String, Survivors>,
) -> Result<&'c Survivors> {
    if !cache.contains_key(query) {
        let s = surviving_rewrites(policy, query, config)?;
        cache.insert(query.to_string(), s);
    }
    Ok(&cache[query])
}

fn recall_rate_cached(
    policy: &Policy,
    records: &[RecallEvalRecord],
    engine: &SearchEngine,
    config: &EvalConfig,
    cache: &mut BTreeMap<String, Survivors>,
) -> Result<f64> {
    if config.rewrite_count == 0 {
        return Err(Error::InvalidArgument("rewrite_count must be >= 1".into()));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in records {
        let s = survivors_for(policy, &r.query, config, cache)?;
        if union_recall(engine, &s.rewrites).contains(&r.clicked_product_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Mean aggregated relevance over surviving (query, rewrite) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSummary {
    pub mean: f64,
    pub pairs: usize,
    /// No pair survived; `mean` is reported as 0.
    pub empty: bool,
}

pub fn relevance_metric(
    policy: &Policy,
    queries: &[String],
    engine: &SearchEngine,
    config: &EvalConfig,
    top_m: usize,
) -> Result<RelevanceSummary> {
    let mut cache = BTreeMap::new();
    relevance_metric_cached(policy, queries, engine, config, top_m, &mut cache)
}

fn relevance_metric_cached(
    policy: &Policy,
    queries: &[String],
    engine: &SearchEngine,
    config: &EvalConfig,
    top_m: usize,
    cache: &mut BTreeMap<String, Survivors>,
) -> Result<RelevanceSummary> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for q in queries {
        let s = survivors_for(policy, q, config, cache)?;
        for r in &s.rewrites {
            sum += engine.aggregate_relevance(q, &engine.retrieve(r), top_m).value();
            pairs += 1;
        }
    }
    Ok(RelevanceSummary {
        mean: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        pairs,
        empty: pairs == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tagging_accuracy: f64,
    pub recall_rate: f64,
    pub relevance_score: f64,
    pub tagging_evaluated: usize,
    pub recall_evaluated: usize,
    pub relevance_pairs: usize,
    pub relevance_empty: bool,
    pub decoded: usize,
    pub skipped_malformed: usize,
}

impl MetricsReport {
    pub const TSV_HEADER: &'static str = "tagging_accuracy\trecall_rate\trelevance_score\ttagging_evaluated\trecall_evaluated\trelevance_pairs\tdecoded\tskipped_malformed";

    pub fn tsv_row(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
            self.tagging_accuracy,
            self.recall_rate,
            self.relevance_score,
            self.tagging_evaluated,
            self.recall_evaluated,
            self.relevance_pairs,
            self.decoded,
            self.skipped_malformed
        )
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Distinct queries of the recall set, in order.
pub fn recall_queries(records: &[RecallEvalRecord]) -> Vec<String> {
    let set: BTreeSet<&String> = records.iter().map(|r| &r.query).collect();
    set.into_iter().cloned().collect()
}

/// All three metrics; the relevance score runs over the recall-eval queries.
pub fn evaluate(
    policy: &Policy,
    tagging: &[TaggingEvalRecord],
    recall: &[RecallEvalRecord],
    engine: &SearchEngine,
    config: &EvalConfig,
    reward_config: &RewardConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    let mut cache = BTreeMap::new();
    let tagging_accuracy = if tagging.is_empty() {
        0.0
    } else {
        tagging_accuracy(policy, tagging)?
    };
    let recall_rate = recall_rate_cached(policy, recall, engine, config, &mut cache)?;
    let rel = relevance_metric_cached(policy, &recall_queries(recall), engine, config, reward_config.top_m, &mut cache)?;
    Ok(MetricsReport {
        tagging_accuracy,
        recall_rate,
        relevance_score: rel.mean,
        tagging_evaluated: tagging.len(),
        recall_evaluated: recall.len(),
        relevance_pairs: rel.pairs,
        relevance_empty: rel.empty,
        decoded: cache.values().map(|s| s.decoded).sum(),
        skipped_malformed: cache.values().map(|s| s.malformed).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    BeamSize,
    RewriteNumber,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BeamSize => "beam_size",
            SweepAxis::RewriteNumber => "rewrite_number",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "beam_size" => Some(SweepAxis::BeamSize),
            "rewrite_number" => Some(SweepAxis::RewriteNumber),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub report: MetricsReport,
}

/// Inputs shared by every sweep cell.
pub struct SweepInputs<'a> {
    pub engine: &'a SearchEngine,
    /// Starting checkpoint: the SFT policy for beam-size sweeps, the policy
    /// under test for rewrite-number sweeps.
    pub policy: &'a Policy,
    pub rl_records: &'a [RlRecord],
    pub tagging: &'a [TaggingEvalRecord],
    pub recall: &'a [RecallEvalRecord],
    pub eval: EvalConfig,
    pub rl: RlConfig,
    pub reward: RewardConfig,
    pub seed: u64,
}

/// One evaluation per value with identical data and seeds. Beam-size cells
/// re-run GRPO with that group size; rewrite-number cells change only how
/// many survivors are kept.
pub fn run_sweep(axis: SweepAxis, values: &[usize], inputs: &SweepInputs<'_>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let report = match axis {
            SweepAxis::RewriteNumber => {
                let eval = EvalConfig {
                    rewrite_count: value,
                    ..inputs.eval
                };
                evaluate(inputs.policy, inputs.tagging, inputs.recall, inputs.engine, &eval, &inputs.reward)?
            }
            SweepAxis::BeamSize => {
                let rl = RlConfig {
                    group_size: value,
                    ..inputs.rl
                };
                let trained = train_grpo(
                    &rl,
                    inputs.policy,
                    inputs.rl_records,
                    inputs.engine,
                    &inputs.reward,
                    inputs.seed,
                    |_, _| Ok(()),
                )?;
                evaluate(&trained.policy, inputs.tagging, inputs.recall, inputs.engine, &inputs.eval, &inputs.reward)?
            }
        };
        rows.push(SweepRow { value, report });
    }
    Ok(rows)
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{}\t{}\n", axis.name(), MetricsReport::TSV_HEADER);
    for r in rows {
        let _ = writeln!(out, "{}\t{}", r.value, r.report.tsv_row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, Product, SynonymTable};
    use crate::index::Bm25Params;
    use crate::policy::{PolicyParams, Vocab};

    fn engine() -> SearchEngine {
        let titles = ["kappa nylon bag", "kappa canvas bag", "puma nylon shoe", "puma canvas shoe", "kappa nylon shoe"];
        let products = titles
            .iter()
            .enumerate()
            .map(|(i, t)| Product::new(i as u32, t.to_string(), BTreeMap::from([("s".into(), "x".into())])))
            .collect();
        let cat = Catalog::new(products, SynonymTable::default(), 0);
        SearchEngine::new(cat, Bm25Params::default(), 2).unwrap()
    }

    /// A policy whose output bias makes one sequence dominate.
    fn forced_policy(vocab: &Vocab, rewrite: &[&str], tag: u32) -> Policy {
        let mut params = PolicyParams::zeros(vocab.len(), 2);
        let r = params.range(crate::policy::params::Block::OutputBias);
        // the same bias at every step: strongly prefer the first rewrite
        // token, then SEP, then the chosen tag
        params.values[r.start + vocab.id(rewrite[0]) as usize] = 30.0;
        params.values[r.start + crate::policy::vocab::SEP as usize] = 20.0;
        params.values[r.start + tag as usize] = 10.0;
        Policy {
            vocab: vocab.clone(),
            params,
            grammar: Grammar::Tagged,
        }
    }

    #[test]
    fn tagging_accuracy_counts_and_ties() {
        let vocab = Vocab::from_words(["kappa", "bag", "puma"]);
        let zero = Policy {
            vocab: vocab.clone(),
            params: PolicyParams::zeros(vocab.len(), 2),
            grammar: Grammar::Tagged,
        };
        let recs: Vec<TaggingEvalRecord> = (0..10)
            .map(|i| TaggingEvalRecord {
                query: "kappa".into(),
                rewrite: "bag".into(),
                gold_tag: Tag::from_indicator(i % 2 == 0),
            })
            .collect();
        // uniform tag head: ties go to tag 0, so exactly the gold-0 half is right
        assert_eq!(tagging_accuracy(&zero, &recs).unwrap(), 0.5);
        let always1 = forced_policy(&vocab, &["bag"], crate::policy::vocab::TAG1);
        assert_eq!(tagging_accuracy(&always1, &recs).unwrap(), 0.5);
        let gold1: Vec<_> = recs.iter().filter(|r| r.gold_tag == Tag::Relevant).cloned().collect();
        assert_eq!(tagging_accuracy(&always1, &gold1).unwrap(), 1.0);
        assert!(tagging_accuracy(&zero, &[]).is_err());
    }

    #[test]
    fn recall_and_relevance_hand_traced() {
        let e = engine();
        let vocab = Vocab::from_words(e.catalog.all_tokens());
        // always decodes "puma <sep> <tag1>"; "puma" retrieves products 2 and 3
        let p = forced_policy(&vocab, &["puma"], crate::policy::vocab::TAG1);
        let cfg = EvalConfig {
            beam_size: 4,
            rewrite_count: 1,
            max_len: 6,
        };
        let s = surviving_rewrites(&p, "kappa", &cfg).unwrap();
        assert_eq!(s.rewrites, vec!["puma".to_string()]);
        let recs = vec![
            RecallEvalRecord { query: "kappa".into(), clicked_product_id: 2 },
            RecallEvalRecord { query: "kappa".into(), clicked_product_id: 0 },
        ];
        assert_eq!(recall_rate(&p, &recs, &e, &cfg).unwrap(), 0.5);
        // relevance of "puma shoe" titles to "puma": F1 = 2·(1/3)·1/(4/3) = 0.5
        let rel = relevance_metric(&p, &["puma".to_string()], &e, &cfg, 2).unwrap();
        assert_eq!(rel.pairs, 1);
        assert!((rel.mean - 0.25).abs() < 1e-12);
        // tag-0 outputs are filtered out entirely
        let p0 = forced_policy(&vocab, &["puma"], crate::policy::vocab::TAG0);
        assert_eq!(recall_rate(&p0, &recs, &e, &cfg).unwrap(), 0.0);
        let rel0 = relevance_metric(&p0, &["puma".to_string()], &e, &cfg, 2).unwrap();
        assert!(rel0.empty && rel0.mean == 0.0);
    }
}
