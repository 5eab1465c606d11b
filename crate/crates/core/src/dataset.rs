//! Training and evaluation data: query sampling, the rule-based seed
//! rewriter, click-filter rejection sampling, relevance tagging, and all
//! dataset file formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{normalize, tokenize, Catalog, ProductId};
use crate::clicks::{simulate_clicks, Click, ClickSet};
use crate::engine::SearchEngine;
use crate::error::{Error, Result};
use crate::seed;

pub const SFT_PREFIX: &str = "The synonymous search term and its corresponding relevance tag for ";
pub const SFT_ARE: &str = " are ";
pub const SEP_MARKER: &str = "<|sep|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    Irrelevant,
    Relevant,
}

impl Tag {
    pub fn from_indicator(relevant: bool) -> Self {
        if relevant {
            Tag::Relevant
        } else {
            Tag::Irrelevant
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Tag::Irrelevant => 0,
            Tag::Relevant => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "0" => Some(Tag::Irrelevant),
            "1" => Some(Tag::Relevant),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryRewritePair {
    pub query: String,
    pub rewrite: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaggedExample {
    pub query: String,
    pub rewrite: String,
    pub tag: Tag,
}

impl TaggedExample {
    pub fn pair(&self) -> QueryRewritePair {
        QueryRewritePair {
            query: self.query.clone(),
            rewrite: self.rewrite.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlRecord {
    pub query: String,
    pub clicks: Vec<Click>,
}

impl RlRecord {
    pub fn click_set(&self) -> ClickSet {
        ClickSet {
            query_text: self.query.clone(),
            clicks: self.clicks.clone(),
        }
    }

    pub fn click_product_ids(&self) -> BTreeSet<ProductId> {
        self.clicks.iter().map(|c| c.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggingEvalRecord {
    pub query: String,
    pub rewrite: String,
    pub gold_tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallEvalRecord {
    pub query: String,
    pub clicked_product_id: ProductId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Rewrites drawn from the seed policy per query.
    pub rewrites_per_query: usize,
    /// Probability that an aliasable query token is surfaced as its alias.
    pub alias_probability: f64,
    /// Fraction of query intents held out for evaluation.
    pub eval_fraction: f64,
    /// Depth of the engine result list users click on.
    pub click_depth: usize,
    /// Number of query surfaces sampled per intent.
    pub surfaces_per_intent: usize,
    /// Extra off-intent rewrites (token drop or same-slot swap) per query.
    pub drift_rewrites: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            rewrites_per_query: 4,
            alias_probability: 0.7,
            eval_fraction: 0.2,
            click_depth: 20,
            surfaces_per_intent: 3,
            drift_rewrites: 8,
        }
    }
}

/// Source of rewrites standing in for the previous-generation production
/// rewriter.
pub trait SeedPolicy {
    fn rewrites(&self, query: &str, n: usize, rng: &mut dyn rand::RngCore) -> Vec<String>;
}

/// Rewrites by substituting any subset of query tokens with synonyms.
#[derive(Debug, Clone, Copy)]
pub struct SynonymRewriter<'a> {
    pub catalog: &'a Catalog,
}

impl SynonymRewriter<'_> {
    /// All substitution variants, identity first.
    pub fn variants(&self, query: &str) -> Vec<String> {
        let tokens = tokenize(query);
        if tokens.is_empty() {
            return Vec::new();
        }
        let mut variants: Vec<Vec<String>> = vec![Vec::new()];
        for tok in &tokens {
            let options: Vec<String> = std::iter::once(tok.clone())
                .chain(self.catalog.synonyms.synonyms_of(tok).map(str::to_string))
                .collect();
            variants = variants
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |o| {
                        let mut v = prefix.clone();
                        v.push(o.clone());
                        v
                    })
                })
                .collect();
        }
        let mut seen = BTreeSet::new();
        variants
            .into_iter()
            .map(|v| v.join(" "))
            .filter(|v| seen.insert(v.clone()))
            .collect()
    }
}

impl SeedPolicy for SynonymRewriter<'_> {
    fn rewrites(&self, query: &str, n: usize, rng: &mut dyn rand::RngCore) -> Vec<String> {
        let mut v = self.variants(query);
        v.shuffle(rng);
        v.truncate(n);
        v
    }
}

/// Synonym rewriter that also emits off-intent rewrites: a token dropped or
/// replaced by another value of the same catalog slot. Stands in for the
/// mistakes of a learned production rewriter.
#[derive(Debug, Clone)]
pub struct DriftingRewriter<'a> {
    pub synonyms: SynonymRewriter<'a>,
    pub drift: usize,
    slot_of: BTreeMap<String, Vec<String>>,
}

impl<'a> DriftingRewriter<'a> {
    pub fn new(catalog: &'a Catalog, drift: usize) -> Self {
        let mut slot_of = BTreeMap::new();
        for slot in ["brand", "category", "modifier"] {
            let values = catalog.slot_values(slot);
            for v in &values {
                slot_of.insert(v.clone(), values.clone());
            }
        }
        Self {
            synonyms: SynonymRewriter { catalog },
            drift,
            slot_of,
        }
    }

    /// Every drop and swap of a single token, in a fixed order.
    pub fn drifts(&self, query: &str) -> Vec<String> {
        let catalog = self.synonyms.catalog;
        let tokens = tokenize(query);
        let mut out = BTreeSet::new();
        for i in 0..tokens.len() {
            if tokens.len() > 1 {
                let mut dropped = tokens.clone();
                dropped.remove(i);
                out.insert(dropped.join(" "));
            }
            let canonical = catalog.title_form(&tokens[i]);
            for sibling in self.slot_of.get(canonical).into_iter().flatten() {
                if sibling != canonical {
                    let mut swapped = tokens.clone();
                    swapped[i] = sibling.clone();
                    out.insert(swapped.join(" "));
                }
            }
        }
        out.into_iter().collect()
    }
}

impl SeedPolicy for DriftingRewriter<'_> {
    fn rewrites(&self, query: &str, n: usize, rng: &mut dyn rand::RngCore) -> Vec<String> {
        let mut out = self.synonyms.rewrites(query, n, rng);
        let mut drifts = self.drifts(query);
        drifts.retain(|d| !out.contains(d));
        drifts.shuffle(rng);
        out.extend(drifts.into_iter().take(self.drift));
        out
    }
}

pub fn collect_pairs(
    policy: &dyn SeedPolicy,
    queries: &[String],
    n_per_query: usize,
    seed: u64,
) -> Result<Vec<QueryRewritePair>> {
    if n_per_query == 0 {
        return Err(Error::InvalidArgument("n_per_query must be >= 1".into()));
    }
    let mut pairs = Vec::new();
    for q in queries {
        let mut rng = seed::keyed(seed, "rewriter", q);
        for rewrite in policy.rewrites(q, n_per_query, &mut rng) {
            if tokenize(&rewrite).is_empty() {
                continue;
            }
            pairs.push(QueryRewritePair {
                query: q.clone(),
                rewrite,
            });
        }
    }
    Ok(pairs)
}

/// Rejection sampling: keep pairs whose rewrite retrieves a clicked product.
pub fn click_filter(
    pairs: &[QueryRewritePair],
    engine: &SearchEngine,
    click_sets: &BTreeMap<String, ClickSet>,
) -> Result<Vec<QueryRewritePair>> {
    let mut kept = Vec::new();
    for pair in pairs {
        let clicks = click_sets
            .get(&pair.query)
            .ok_or_else(|| Error::MissingClickSet(pair.query.clone()))?;
        let clicked = clicks.ids();
        if engine.retrieve(&pair.rewrite).ids().any(|id| clicked.contains(&id)) {
            kept.push(pair.clone());
        }
    }
    Ok(kept)
}

/// Tag is relevant iff the aggregated relevance of the rewrite's recall set
/// strictly exceeds `tau_relev`.
pub fn relevance_tag(engine: &SearchEngine, query: &str, rewrite: &str, top_m: usize, tau_relev: f64) -> Tag {
    let recall = engine.retrieve(rewrite);
    Tag::from_indicator(engine.aggregate_relevance(query, &recall, top_m).value() > tau_relev)
}

pub fn assign_tags(
    pairs: &[QueryRewritePair],
    engine: &SearchEngine,
    top_m: usize,
    tau_relev: f64,
) -> Result<Vec<TaggedExample>> {
    if !(0.0..=1.0).contains(&tau_relev) {
        return Err(Error::InvalidArgument(format!("tau_relev {tau_relev} outside [0, 1]")));
    }
    Ok(pairs
        .iter()
        .map(|p| TaggedExample {
            query: p.query.clone(),
            rewrite: p.rewrite.clone(),
            tag: relevance_tag(engine, &p.query, &p.rewrite, top_m, tau_relev),
        })
        .collect())
}

pub fn render_sft_record(example: &TaggedExample) -> String {
    format!(
        "{SFT_PREFIX}{}{SFT_ARE}{} {SEP_MARKER} {}",
        example.query, example.rewrite, example.tag
    )
}

pub fn parse_sft_record(text: &str) -> Result<TaggedExample> {
    let malformed = |why: &str| Error::Malformed(format!("{why}: {text:?}"));
    let body = text.strip_prefix(SFT_PREFIX).ok_or_else(|| malformed("missing prompt prefix"))?;
    let (head, tag) = body
        .rsplit_once(&format!(" {SEP_MARKER} "))
        .ok_or_else(|| malformed("missing <|sep|> marker"))?;
    let tag = Tag::parse(tag).ok_or_else(|| malformed("tag must be 0 or 1"))?;
    let (query, rewrite) = head.split_once(SFT_ARE).ok_or_else(|| malformed("missing ' are '"))?;
    Ok(TaggedExample {
        query: query.to_string(),
        rewrite: rewrite.to_string(),
        tag,
    })
}

pub fn build_rl_dataset(tagged: &[TaggedExample], click_sets: &BTreeMap<String, ClickSet>) -> Result<Vec<RlRecord>> {
    if tagged.is_empty() {
        return Err(Error::InvalidArgument("tagged dataset is empty".into()));
    }
    let queries: BTreeSet<&String> = tagged.iter().map(|e| &e.query).collect();
    let mut out = Vec::new();
    for q in queries {
        let clicks = click_sets.get(q).ok_or_else(|| Error::MissingClickSet(q.clone()))?;
        if clicks.is_empty() {
            continue;
        }
        out.push(RlRecord {
            query: q.clone(),
            clicks: clicks.clicks.clone(),
        });
    }
    Ok(out)
}

/// A query intent: the grammar slots a user is looking for.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Intent {
    pub tokens: Vec<String>,
}

impl Intent {
    pub fn key(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Brand+category and modifier+category intents, in deterministic order.
pub fn enumerate_intents(catalog: &Catalog) -> Vec<Intent> {
    let brands = catalog.slot_values("brand");
    let categories = catalog.slot_values("category");
    let modifiers = catalog.slot_values("modifier");
    let mut intents = Vec::new();
    for c in &categories {
        for b in &brands {
            intents.push(Intent {
                tokens: vec![b.clone(), c.clone()],
            });
        }
        for m in &modifiers {
            intents.push(Intent {
                tokens: vec![m.clone(), c.clone()],
            });
        }
    }
    intents
}

/// Samples user-side phrasings of an intent: each token is independently
/// replaced by a synonym with `alias_probability`.
pub fn surface_queries(catalog: &Catalog, intent: &Intent, config: &DatasetConfig, seed: u64) -> Vec<String> {
    let mut rng = seed::keyed(seed, "queries", &intent.key());
    let mut out = BTreeSet::new();
    for _ in 0..config.surfaces_per_intent {
        let q: Vec<String> = intent
            .tokens
            .iter()
            .map(|t| {
                let syns: Vec<&str> = catalog.synonyms.synonyms_of(t).collect();
                if !syns.is_empty() && rng.gen::<f64>() < config.alias_probability {
                    syns[rng.gen_range(0..syns.len())].to_string()
                } else {
                    t.clone()
                }
            })
            .collect();
        out.insert(q.join(" "));
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySplit {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

/// Splits intents (not surfaces) so that no evaluation query shares an
/// intent with a training query.
pub fn split_queries(catalog: &Catalog, config: &DatasetConfig, seed: u64) -> QuerySplit {
    let mut train = BTreeSet::new();
    let mut eval = BTreeSet::new();
    for intent in enumerate_intents(catalog) {
        let surfaces = surface_queries(catalog, &intent, config, seed);
        let held_out = seed::keyed(seed, "split", &intent.key()).gen::<f64>() < config.eval_fraction;
        let target = if held_out { &mut eval } else { &mut train };
        target.extend(surfaces);
    }
    // a surface reachable from two intents stays on the training side only
    let eval: Vec<String> = eval.into_iter().filter(|q| !train.contains(q)).collect();
    QuerySplit {
        train: train.into_iter().collect(),
        eval,
    }
}

/// Clicks on the engine's results for the synonym-expanded query: the
/// production engine that produced the logs already bridges known synonyms.
pub fn logged_clicks(engine: &SearchEngine, query: &str, config: &DatasetConfig, seed: u64) -> ClickSet {
    let recall = engine.retrieve_k(&engine.catalog.expand(query), config.click_depth);
    simulate_clicks(&engine.catalog, query, &recall, seed)
}

pub fn build_eval_datasets(
    engine: &SearchEngine,
    eval_queries: &[String],
    top_m: usize,
    tau_relev: f64,
    seed: u64,
    config: &DatasetConfig,
) -> (Vec<TaggingEvalRecord>, Vec<RecallEvalRecord>) {
    let rewriter = DriftingRewriter::new(&engine.catalog, config.drift_rewrites);
    let mut tagging = Vec::new();
    let mut recall = Vec::new();
    for q in eval_queries {
        let mut rng = seed::keyed(seed, "eval-rewriter", q);
        let mut rewrites = rewriter.synonyms.variants(q);
        let mut drifts = rewriter.drifts(q);
        drifts.shuffle(&mut rng);
        rewrites.extend(drifts.into_iter().take(config.drift_rewrites));
        for rewrite in rewrites {
            tagging.push(TaggingEvalRecord {
                query: q.clone(),
                gold_tag: relevance_tag(engine, q, &rewrite, top_m, tau_relev),
                rewrite,
            });
        }
        // only clicks the query's own results miss: recall then credits what
        // the rewrites add
        let clicks = logged_clicks(engine, q, config, seed::derive(seed, "eval-clicks", ""));
        let direct: BTreeSet<ProductId> = engine.retrieve(q).ids().collect();
        let missed: Vec<&Click> = clicks.clicks.iter().filter(|c| !direct.contains(&c.id)).collect();
        if !missed.is_empty() {
            let mut rng = seed::keyed(seed, "eval-pick", q);
            let pick = missed[rng.gen_range(0..missed.len())];
            recall.push(RecallEvalRecord {
                query: q.clone(),
                clicked_product_id: pick.id,
            });
        }
    }
    tagging.sort_by(|a, b| (&a.query, &a.rewrite).cmp(&(&b.query, &b.rewrite)));
    recall.sort_by(|a, b| a.query.cmp(&b.query));
    (tagging, recall)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train_queries: usize,
    pub eval_queries: usize,
    pub collected_pairs: usize,
    pub filtered_pairs: usize,
    pub relevant_tags: usize,
    pub rl_records: usize,
    pub tagging_eval: usize,
    pub recall_eval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train_queries: Vec<String>,
    pub eval_queries: Vec<String>,
    pub sft: Vec<TaggedExample>,
    pub rl: Vec<RlRecord>,
    pub tagging_eval: Vec<TaggingEvalRecord>,
    pub recall_eval: Vec<RecallEvalRecord>,
    pub stats: DatasetStats,
}

/// Full data pipeline: queries → seed rewrites → click filter → tags → RL and
/// evaluation sets.
pub fn build_datasets(
    engine: &SearchEngine,
    config: &DatasetConfig,
    top_m: usize,
    tau_relev: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    let split = split_queries(&engine.catalog, config, seed);
    let rewriter = DriftingRewriter::new(&engine.catalog, config.drift_rewrites);
    let pairs = collect_pairs(&rewriter, &split.train, config.rewrites_per_query, seed)?;
    let click_seed = seed::derive(seed, "train-clicks", "");
    let click_sets: BTreeMap<String, ClickSet> = split
        .train
        .iter()
        .map(|q| (q.clone(), logged_clicks(engine, q, config, click_seed)))
        .collect();
    let filtered = click_filter(&pairs, engine, &click_sets)?;
    let mut sft = assign_tags(&filtered, engine, top_m, tau_relev)?;
    sft.sort();
    let rl = if sft.is_empty() {
        Vec::new()
    } else {
        build_rl_dataset(&sft, &click_sets)?
    };
    let (tagging_eval, recall_eval) = build_eval_datasets(engine, &split.eval, top_m, tau_relev, seed, config);
    let stats = DatasetStats {
        train_queries: split.train.len(),
        eval_queries: split.eval.len(),
        collected_pairs: pairs.len(),
        filtered_pairs: filtered.len(),
        relevant_tags: sft.iter().filter(|e| e.tag == Tag::Relevant).count(),
        rl_records: rl.len(),
        tagging_eval: tagging_eval.len(),
        recall_eval: recall_eval.len(),
    };
    Ok(DatasetBundle {
        train_queries: split.train,
        eval_queries: split.eval,
        sft,
        rl,
        tagging_eval,
        recall_eval,
        stats,
    })
}

// ---------------------------------------------------------------------------
// File formats. All files are UTF-8, LF-terminated, ordered by query.
// ---------------------------------------------------------------------------

pub fn sft_to_text(examples: &[TaggedExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&render_sft_record(e));
        out.push('\n');
    }
    out
}

pub fn sft_from_text(text: &str) -> Result<Vec<TaggedExample>> {
    text.lines().filter(|l| !l.is_empty()).map(parse_sft_record).collect()
}

/// `query<TAB>id:position,id:position,...`
pub fn rl_to_tsv(records: &[RlRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let payload: Vec<String> = r.clicks.iter().map(|c| format!("{}:{}", c.id, c.position)).collect();
        let _ = writeln!(out, "{}\t{}", r.query, payload.join(","));
    }
    out
}

pub fn rl_from_tsv(text: &str) -> Result<Vec<RlRecord>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (query, payload) = line
            .split_once('\t')
            .ok_or_else(|| Error::Malformed(format!("rl record {line:?}")))?;
        let mut clicks = Vec::new();
        for item in payload.split(',').filter(|s| !s.is_empty()) {
            let (id, pos) = item
                .split_once(':')
                .ok_or_else(|| Error::Malformed(format!("rl click {item:?}")))?;
            let bad = || Error::Malformed(format!("rl click {item:?}"));
            clicks.push(Click {
                id: id.parse().map_err(|_| bad())?,
                position: pos.parse().map_err(|_| bad())?,
            });
        }
        if clicks.is_empty() {
            return Err(Error::Malformed(format!("rl record without clicks: {line:?}")));
        }
        out.push(RlRecord {
            query: query.to_string(),
            clicks,
        });
    }
    Ok(out)
}

/// `query<TAB>rewrite<TAB>gold_tag`
pub fn tagging_eval_to_tsv(records: &[TaggingEvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.query, r.rewrite, r.gold_tag);
    }
    out
}

pub fn tagging_eval_from_tsv(text: &str) -> Result<Vec<TaggingEvalRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                [q, r, t] => Ok(TaggingEvalRecord {
                    query: q.to_string(),
                    rewrite: r.to_string(),
                    gold_tag: Tag::parse(t).ok_or_else(|| Error::Malformed(format!("tag in {line:?}")))?,
                }),
                _ => Err(Error::Malformed(format!("tagging record {line:?}"))),
            }
        })
        .collect()
}

/// `query<TAB>clicked_product_id`
pub fn recall_eval_to_tsv(records: &[RecallEvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}", r.query, r.clicked_product_id);
    }
    out
}

pub fn recall_eval_from_tsv(text: &str) -> Result<Vec<RecallEvalRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (q, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Malformed(format!("recall record {line:?}")))?;
            Ok(RecallEvalRecord {
                query: q.to_string(),
                clicked_product_id: id
                    .parse()
                    .map_err(|_| Error::Malformed(format!("product id in {line:?}")))?,
            })
        })
        .collect()
}

pub fn queries_to_text(queries: &[String]) -> String {
    queries.iter().map(|q| format!("{}\n", normalize(q))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, CatalogConfig, Product, SynonymTable};
    use crate::index::Bm25Params;
    use proptest::prelude::*;

    fn engine() -> SearchEngine {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        SearchEngine::new(cat, Bm25Params::default(), 10).unwrap()
    }

    fn toy_engine() -> SearchEngine {
        let titles = ["kappa school bag", "kappa red shoe", "puma red bag", "puma blue shoe"];
        let products = titles
            .iter()
            .enumerate()
            .map(|(i, t)| Product::new(i as u32, t.to_string(), BTreeMap::from([("s".into(), "x".into())])))
            .collect();
        let cat = Catalog::new(products, SynonymTable::from_pairs([("backpack", "bag")]), 0);
        SearchEngine::new(cat, Bm25Params::default(), 10).unwrap()
    }

    #[test]
    fn synonym_rewriter_substitutes() {
        let e = toy_engine();
        let rw = SynonymRewriter { catalog: &e.catalog };
        let v = rw.variants("kappa backpack");
        assert_eq!(v, ["kappa backpack", "kappa bag"]);
        let mut rng = seed::stream(1, "t");
        assert!(rw.rewrites("kappa backpack", 5, &mut rng).contains(&"kappa bag".to_string()));
        assert_eq!(rw.variants("red shoe"), ["red shoe"]);
    }

    #[test]
    fn drifts_drop_or_swap_one_token() {
        let e = engine();
        let rw = DriftingRewriter::new(&e.catalog, 3);
        let brands = e.catalog.slot_values("brand");
        let q = e.catalog.products[0].title.clone();
        let tokens = tokenize(&q);
        let drifts = rw.drifts(&q);
        assert!(!drifts.is_empty());
        assert!(!drifts.contains(&q));
        for d in &drifts {
            let dt = tokenize(d);
            let changed = tokens.iter().zip(&dt).filter(|(a, b)| a != b).count();
            assert!(dt.len() + 1 == tokens.len() || (dt.len() == tokens.len() && changed == 1), "{d}");
        }
        for b in brands.iter().filter(|b| **b != tokens[0]) {
            let swapped = std::iter::once(b.as_str()).chain(tokens[1..].iter().map(String::as_str));
            assert!(drifts.contains(&swapped.collect::<Vec<_>>().join(" ")));
        }
        let mut rng = seed::stream(2, "t");
        let out = rw.rewrites(&q, 2, &mut rng);
        let synonyms = rw.synonyms.variants(&q);
        assert_eq!(out.iter().filter(|r| !synonyms.contains(r)).count(), 3);
        let unique: BTreeSet<_> = out.iter().collect();
        assert_eq!(unique.len(), out.len());
    }

    #[test]
    fn recall_eval_picks_a_click_the_query_misses() {
        let e = engine();
        let config = DatasetConfig::default();
        let split = split_queries(&e.catalog, &config, 5);
        let (_, recall) = build_eval_datasets(&e, &split.eval, 5, 0.2, 5, &config);
        assert!(!recall.is_empty());
        for r in &recall {
            assert!(!e.retrieve(&r.query).ids().any(|id| id == r.clicked_product_id));
            let clicks = logged_clicks(&e, &r.query, &config, seed::derive(5, "eval-clicks", ""));
            assert!(clicks.clicks.iter().any(|c| c.id == r.clicked_product_id));
        }
    }

    #[test]
    fn collect_pairs_is_deterministic() {
        let e = engine();
        let rw = SynonymRewriter { catalog: &e.catalog };
        let split = split_queries(&e.catalog, &DatasetConfig::default(), 3);
        let a = collect_pairs(&rw, &split.train, 2, 9).unwrap();
        assert_eq!(a, collect_pairs(&rw, &split.train, 2, 9).unwrap());
        let mut per_query: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for p in &a {
            assert!(per_query.entry(&p.query).or_default().insert(&p.rewrite), "duplicate rewrite");
        }
        assert!(per_query.values().all(|s| s.len() <= 2));
        assert!(collect_pairs(&rw, &split.train, 0, 9).is_err());
    }

    #[test]
    fn click_filter_keeps_exactly_intersecting_pairs() {
        let e = engine();
        let rw = SynonymRewriter { catalog: &e.catalog };
        let cfg = DatasetConfig::default();
        let split = split_queries(&e.catalog, &cfg, 5);
        let queries: Vec<String> = split.train.iter().take(8).cloned().collect();
        let mut pairs = collect_pairs(&rw, &queries, 4, 1).unwrap();
        pairs.push(QueryRewritePair { query: queries[0].clone(), rewrite: "zzzz".into() });
        pairs.truncate(20);
        let clicks: BTreeMap<String, ClickSet> =
            queries.iter().map(|q| (q.clone(), logged_clicks(&e, q, &cfg, 4))).collect();
        let kept = click_filter(&pairs, &e, &clicks).unwrap();
        // brute-force intersection check against a full scan of the recall set
        let expected: Vec<QueryRewritePair> = pairs
            .iter()
            .filter(|p| {
                let r: Vec<ProductId> = e.retrieve(&p.rewrite).items.iter().map(|i| i.id).collect();
                clicks[&p.query].clicks.iter().any(|c| r.contains(&c.id))
            })
            .cloned()
            .collect();
        assert_eq!(kept, expected);
        assert!(kept.len() <= pairs.len());
        assert!(!kept.iter().any(|p| p.rewrite == "zzzz"));
        let missing = click_filter(&pairs, &e, &BTreeMap::new());
        assert!(matches!(missing, Err(Error::MissingClickSet(_))));
    }

    #[test]
    fn tags_follow_strict_threshold() {
        let e = toy_engine();
        // "kappa bag" retrieves a product set with positive aggregated relevance
        let recall = e.retrieve("kappa bag");
        let rr = e.aggregate_relevance("kappa backpack", &recall, 1).value();
        assert!(rr > 0.0);
        assert_eq!(relevance_tag(&e, "kappa backpack", "kappa bag", 1, rr - 1e-9), Tag::Relevant);
        // boundary: r_R exactly at the threshold is not relevant
        assert_eq!(relevance_tag(&e, "kappa backpack", "kappa bag", 1, rr), Tag::Irrelevant);
        // empty recall set → 0
        assert_eq!(relevance_tag(&e, "kappa backpack", "zzz", 1, 0.2), Tag::Irrelevant);
        let pairs = vec![QueryRewritePair { query: "kappa backpack".into(), rewrite: "kappa bag".into() }];
        assert_eq!(assign_tags(&pairs, &e, 1, 0.2).unwrap().len(), 1);
        assert!(assign_tags(&pairs, &e, 1, 1.5).is_err());
    }

    #[test]
    fn sft_record_template() {
        let e = TaggedExample {
            query: "Kappa school bag".into(),
            rewrite: "Kappa backpack".into(),
            tag: Tag::Relevant,
        };
        let s = render_sft_record(&e);
        assert_eq!(
            s,
            "The synonymous search term and its corresponding relevance tag for Kappa school bag are Kappa backpack <|sep|> 1"
        );
        assert_eq!(parse_sft_record(&s).unwrap(), e);
        assert!(parse_sft_record(&s.replace("<|sep|> 1", "<|sep|> 2")).is_err());
        assert!(parse_sft_record(&s.replace(" <|sep|>", "")).is_err());
    }

    proptest! {
        #[test]
        fn sft_round_trip(q in "[a-z]{1,8}( [a-z]{1,8}){0,3}", r in "[a-z]{1,8}( [a-z]{1,8}){0,3}", t in any::<bool>()) {
            prop_assume!(!q.split(' ').any(|w| w == "are"));
            let e = TaggedExample { query: q, rewrite: r, tag: Tag::from_indicator(t) };
            prop_assert_eq!(parse_sft_record(&render_sft_record(&e)).unwrap(), e);
        }
    }

    #[test]
    fn rl_dataset_dedups_and_drops_clickless() {
        let mk = |q: &str, r: &str| TaggedExample { query: q.into(), rewrite: r.into(), tag: Tag::Relevant };
        let tagged = vec![mk("a b", "x"), mk("a b", "y"), mk("a b", "z"), mk("c d", "w")];
        let click = |q: &str, ids: &[u32]| ClickSet {
            query_text: q.into(),
            clicks: ids.iter().enumerate().map(|(i, &id)| Click { id, position: i + 1 }).collect(),
        };
        let sets = BTreeMap::from([("a b".to_string(), click("a b", &[3, 4])), ("c d".to_string(), click("c d", &[]))]);
        let rl = build_rl_dataset(&tagged, &sets).unwrap();
        assert_eq!(rl.len(), 1);
        assert_eq!(rl[0].query, "a b");
        assert_eq!(rl_from_tsv(&rl_to_tsv(&rl)).unwrap(), rl);
        assert!(build_rl_dataset(&[], &sets).is_err());
    }

    #[test]
    fn full_build_is_sound_and_deterministic() {
        let e = engine();
        let cfg = DatasetConfig::default();
        let a = build_datasets(&e, &cfg, 5, 0.2, 17).unwrap();
        let b = build_datasets(&e, &cfg, 5, 0.2, 17).unwrap();
        assert_eq!(a, b);
        assert!(!a.sft.is_empty());
        let train: BTreeSet<&String> = a.train_queries.iter().collect();
        assert!(a.eval_queries.iter().all(|q| !train.contains(q)));
        assert!(a.recall_eval.iter().all(|r| !train.contains(&r.query)));
        // recorded tags are reproducible from stored rewrites
        for ex in &a.sft {
            assert_eq!(relevance_tag(&e, &ex.query, &ex.rewrite, 5, 0.2), ex.tag);
        }
        // RL count equals the number of distinct SFT queries with clicks
        let click_seed = seed::derive(17, "train-clicks", "");
        let distinct: BTreeSet<&String> = a.sft.iter().map(|x| &x.query).collect();
        let expected = distinct.iter().filter(|q| !logged_clicks(&e, q, &cfg, click_seed).is_empty()).count();
        assert_eq!(a.rl.len(), expected);
        assert_eq!(sft_from_text(&sft_to_text(&a.sft)).unwrap(), a.sft);
        assert_eq!(tagging_eval_from_tsv(&tagging_eval_to_tsv(&a.tagging_eval)).unwrap(), a.tagging_eval);
        assert_eq!(recall_eval_from_tsv(&recall_eval_to_tsv(&a.recall_eval)).unwrap(), a.recall_eval);
    }
}
