//! Search-engine feedback and rule rewards for candidate rewrites.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::normalize;
use crate::clicks::ClickSet;
use crate::dataset::Tag;
use crate::engine::SearchEngine;
use crate::error::{Error, Result};
use crate::index::RecallSet;
use crate::policy::RewriteOutput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the character-difference rule reward.
    pub alpha: f64,
    /// Relevance threshold for the tag indicator (strict `>`).
    pub tau_relev: f64,
    /// Number of top recalled products whose relevances are multiplied.
    pub top_m: usize,
    /// Position weights `[outside, middle, top]`.
    pub delta_tiers: [u32; 3],
    /// Rank-fraction cutoffs `[middle, top]`, strictly decreasing.
    pub rank_cutoffs: [f64; 2],
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tau_relev: 0.2,
            top_m: 5,
            delta_tiers: [1, 2, 3],
            rank_cutoffs: [0.70, 0.30],
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let [mid, top] = self.rank_cutoffs;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("reward.alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.tau_relev) {
            return Err(Error::Config(format!("reward.tau_relev must lie in [0, 1], got {}", self.tau_relev)));
        }
        if self.top_m == 0 {
            return Err(Error::Config("reward.top_m must be >= 1".into()));
        }
        if !(0.0 < top && top < mid && mid <= 1.0) {
            return Err(Error::Config(format!(
                "reward.rank_cutoffs must be strictly decreasing in (0, 1], got {:?}",
                self.rank_cutoffs
            )));
        }
        Ok(())
    }

    /// Position weight of a product at 1-based `rank` in a recall set of `len`.
    pub fn delta(&self, rank: usize, len: usize) -> u32 {
        let frac = rank as f64 / len as f64;
        let [mid, top] = self.rank_cutoffs;
        let [outside, middle, best] = self.delta_tiers;
        if frac <= top {
            best
        } else if frac <= mid {
            middle
        } else {
            outside
        }
    }
}

/// Position-weighted count of clicked products the rewrite retrieves.
pub fn productive_reward(clicks: &ClickSet, recall_y: &RecallSet, config: &RewardConfig) -> f64 {
    clicks
        .clicks
        .iter()
        .filter_map(|c| recall_y.rank_of(c.id))
        .map(|rank| config.delta(rank, recall_y.len()) as f64)
        .sum()
}

/// Share of the rewrite's results that the query alone did not retrieve,
/// relative to the query's result count.
pub fn increment_reward(recall_x: &RecallSet, recall_y: &RecallSet) -> Result<f64> {
    if recall_x.is_empty() {
        return Err(Error::UnretrievableQuery);
    }
    let x = recall_x.id_set();
    let overlap = recall_y.ids().filter(|id| x.contains(id)).count();
    Ok((recall_y.len() - overlap) as f64 / recall_x.len() as f64)
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalised by the longer string.
pub fn diff_rate(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / n as f64
    }
}

/// `α · diff(x, y) · len(x) / len(y)`: rewards change, penalises length.
pub fn rule_reward(query: &str, rewrite: &str, alpha: f64) -> f64 {
    let ly = rewrite.chars().count();
    if ly == 0 {
        return 0.0;
    }
    alpha * diff_rate(query, rewrite) * query.chars().count() as f64 / ly as f64
}

/// 1 iff the predicted tag agrees with the relevance indicator.
pub fn tag_reward(r_relevance: f64, tag: Tag, tau_relev: f64) -> f64 {
    if tag == Tag::from_indicator(r_relevance > tau_relev) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_relevance: f64,
    pub r_productive: f64,
    pub r_increment: f64,
    pub r_feedback: f64,
    pub r_rule: f64,
    pub r_rewrite: f64,
    pub r_tag: f64,
    pub r_fusion: f64,
    pub well_formed: bool,
}

impl RewardBreakdown {
    pub fn malformed() -> Self {
        Self::default()
    }

    pub fn identities_hold(&self) -> bool {
        self.r_feedback == self.r_relevance * self.r_increment + self.r_productive
            && self.r_rewrite == self.r_rule * self.r_feedback
            && self.r_fusion == self.r_rewrite * self.r_tag
            && (self.well_formed || self.r_fusion == 0.0)
    }
}

/// Everything about the original query that rewards compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub query: String,
    pub recall: RecallSet,
    pub clicks: ClickSet,
}

impl QueryContext {
    pub fn new(engine: &SearchEngine, query: &str, clicks: ClickSet) -> Self {
        let query = normalize(query);
        Self {
            recall: engine.retrieve(&query),
            query,
            clicks,
        }
    }
}

/// Full breakdown for an already-parsed candidate.
pub fn breakdown(
    engine: &SearchEngine,
    ctx: &QueryContext,
    rewrite: &str,
    tag: Tag,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    let recall_y = engine.retrieve(rewrite);
    let r_relevance = engine.aggregate_relevance(&ctx.query, &recall_y, config.top_m).value();
    let r_productive = productive_reward(&ctx.clicks, &recall_y, config);
    let r_increment = increment_reward(&ctx.recall, &recall_y).map_err(|e| Error::Reward {
        query: ctx.query.clone(),
        source: Box::new(e),
    })?;
    let r_feedback = r_relevance * r_increment + r_productive;
    let r_rule = rule_reward(&ctx.query, &normalize(rewrite), config.alpha);
    let r_rewrite = r_rule * r_feedback;
    let r_tag = tag_reward(r_relevance, tag, config.tau_relev);
    Ok(RewardBreakdown {
        r_relevance,
        r_productive,
        r_increment,
        r_feedback,
        r_rule,
        r_rewrite,
        r_tag,
        r_fusion: r_rewrite * r_tag,
        well_formed: true,
    })
}

/// Fused reward of a decoded output; malformed outputs score zero
/// everywhere.
pub fn fusion_reward(
    engine: &SearchEngine,
    ctx: &QueryContext,
    output: &RewriteOutput,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    match (output.well_formed, output.tag) {
        (true, Some(tag)) => breakdown(engine, ctx, &output.rewrite, tag, config),
        _ => Ok(RewardBreakdown::malformed()),
    }
}

/// Which reward the RL trainer optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Productive,
    Increment,
    Relevance,
    Feedback,
    Rewrite,
    FeedbackTag,
    Fusion,
}

impl RewardKind {
    pub const ALL: [RewardKind; 7] = [
        RewardKind::Productive,
        RewardKind::Increment,
        RewardKind::Relevance,
        RewardKind::Feedback,
        RewardKind::Rewrite,
        RewardKind::FeedbackTag,
        RewardKind::Fusion,
    ];

    pub fn select(self, b: &RewardBreakdown) -> f64 {
        match self {
            RewardKind::Productive => b.r_productive,
            RewardKind::Increment => b.r_increment,
            RewardKind::Relevance => b.r_relevance,
            RewardKind::Feedback => b.r_feedback,
            RewardKind::Rewrite => b.r_rewrite,
            RewardKind::FeedbackTag => b.r_feedback * b.r_tag,
            RewardKind::Fusion => b.r_fusion,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Productive => "productive",
            RewardKind::Increment => "increment",
            RewardKind::Relevance => "relevance",
            RewardKind::Feedback => "feedback",
            RewardKind::Rewrite => "rewrite",
            RewardKind::FeedbackTag => "feedback-tag",
            RewardKind::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

pub const TRACE_HEADER: &str =
    "query\trewrite\ttag\twell_formed\tr_relevance\tr_productive\tr_increment\tr_feedback\tr_rule\tr_rewrite\tr_tag\tr_fusion";

/// One reward-trace line for a scored candidate.
pub fn trace_line(query: &str, output: &RewriteOutput, b: &RewardBreakdown) -> String {
    let tag = output.tag.map_or("-".to_string(), |t| t.to_string());
    let mut line = format!("{query}\t{}\t{tag}\t{}", output.rewrite, u8::from(b.well_formed));
    for v in [
        b.r_relevance,
        b.r_productive,
        b.r_increment,
        b.r_feedback,
        b.r_rule,
        b.r_rewrite,
        b.r_tag,
        b.r_fusion,
    ] {
        let _ = write!(line, "\t{v:?}");
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::Click;
    use crate::index::RecallSet;
    use proptest::prelude::*;

    fn recall(ids: &[u32]) -> RecallSet {
        RecallSet::from_scores("q", ids.iter().enumerate().map(|(i, &id)| (id, 100.0 - i as f64)).collect(), 100)
    }

    fn clicks(ids: &[u32]) -> ClickSet {
        ClickSet {
            query_text: "q".into(),
            clicks: ids.iter().enumerate().map(|(i, &id)| Click { id, position: i + 1 }).collect(),
        }
    }

    #[test]
    fn productive_tiers() {
        let c = RewardConfig::default();
        let ry = recall(&(0..10).collect::<Vec<_>>());
        assert_eq!(productive_reward(&clicks(&[]), &ry, &c), 0.0);
        assert_eq!(productive_reward(&clicks(&[0]), &ry, &c), 3.0);
        // ranks 2 and 7, plus one click outside the recall set
        assert_eq!(productive_reward(&clicks(&[1, 6, 99]), &ry, &c), 5.0);
        assert_eq!(productive_reward(&clicks(&[9]), &ry, &c), 1.0);
    }

    #[test]
    fn increment_examples() {
        let rx: Vec<u32> = (0..20).collect();
        assert_eq!(increment_reward(&recall(&rx), &recall(&[1, 2, 3])).unwrap(), 0.0);
        let ry: Vec<u32> = (0..4).chain(100..106).collect();
        assert_eq!(increment_reward(&recall(&rx), &recall(&ry)).unwrap(), 0.3);
        assert_eq!(increment_reward(&recall(&[1, 2]), &recall(&[5, 6])).unwrap(), 1.0);
        let err = increment_reward(&RecallSet::empty("q", 10), &recall(&[1])).unwrap_err();
        assert_eq!(err.to_string(), "undefined increment for unretrievable query");
    }

    #[test]
    fn rule_examples() {
        assert_eq!(rule_reward("kappa bag", "kappa bag", 1.0), 0.0);
        assert_eq!(rule_reward("abcd", "abce", 1.0), 0.25);
        assert_eq!(rule_reward("abc", "", 1.0), 0.0);
        let short = rule_reward("abcd", "abce", 1.0);
        let long = rule_reward("abcd", "abcdefghij", 1.0);
        assert!(long < diff_rate("abcd", "abcdefghij"));
        assert!(short > 0.0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn tag_examples() {
        assert_eq!(tag_reward(0.72, Tag::Relevant, 0.2), 1.0);
        assert_eq!(tag_reward(0.72, Tag::Irrelevant, 0.2), 0.0);
        assert_eq!(tag_reward(0.0, Tag::Irrelevant, 0.2), 1.0);
        assert_eq!(tag_reward(0.2, Tag::Irrelevant, 0.2), 1.0);
    }

    #[test]
    fn feedback_and_fusion_formulas() {
        let b = RewardBreakdown {
            r_relevance: 0.5,
            r_increment: 0.4,
            r_productive: 2.0,
            ..Default::default()
        };
        assert!((b.r_relevance * b.r_increment + b.r_productive - 2.2).abs() < 1e-15);
        assert!((0.25 * 2.2f64 - 0.55).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            rank_cutoffs: [0.3, 0.7],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(RewardConfig { top_m: 0, ..Default::default() }.validate().is_err());
        assert_eq!(RewardKind::parse("feedback-tag"), Some(RewardKind::FeedbackTag));
    }

    proptest! {
        #[test]
        fn increment_nonnegative_and_zero_iff_subset(
            x in proptest::collection::btree_set(0u32..30, 1..15),
            y in proptest::collection::btree_set(0u32..30, 0..15),
        ) {
            let x: Vec<u32> = x.into_iter().collect();
            let y: Vec<u32> = y.into_iter().collect();
            let r = increment_reward(&recall(&x), &recall(&y)).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, y.iter().all(|id| x.contains(id)));
        }

        #[test]
        fn rule_zero_iff_equal(a in "[a-c ]{1,6}", b in "[a-c ]{1,6}") {
            prop_assert_eq!(rule_reward(&a, &b, 1.0) == 0.0, a == b);
        }
    }
}
