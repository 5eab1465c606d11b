//! Group-relative policy optimisation over beam-decoded candidate groups,
//! and the pairwise preference baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::RlRecord;
use crate::engine::SearchEngine;
use crate::error::{Error, Result};
use crate::optim::{Sgd, SgdConfig};
use crate::policy::decode::{beam_search, sample, PolicyScorer};
use crate::policy::model::sequence_log_prob;
use crate::policy::{value_and_backward, Grammar, Loss, LossGraph, LossTerm, Policy, PolicyParams, RewriteOutput, SequenceSample, TokenId};
use crate::reward::{fusion_reward, QueryContext, RewardBreakdown, RewardConfig, RewardKind};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Candidates per query (beam width).
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub optimizer: SgdConfig,
    pub steps: usize,
    /// Queries per update.
    pub batch_size: usize,
    /// Groups whose reward spread is below this get zero advantages.
    pub sigma_floor: f64,
    pub max_len: usize,
    pub reward: RewardKind,
    /// Draw candidates by ancestral sampling instead of beam search.
    pub stochastic: bool,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 10,
            clip_eps: 0.2,
            kl_beta: 0.4,
            optimizer: SgdConfig {
                learning_rate: 0.1,
                momentum: 0.0,
                clip_norm: 5.0,
            },
            steps: 100,
            batch_size: 16,
            sigma_floor: 1e-8,
            max_len: 8,
            reward: RewardKind::Fusion,
            stochastic: false,
            checkpoint_every: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("grpo.group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("grpo.clip_eps must lie in (0, 1)".into()));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::Config("grpo.kl_beta must be >= 0".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("grpo.sigma_floor must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("grpo.batch_size must be >= 1".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("grpo.max_len must be >= 3".into()));
        }
        self.optimizer.validate("grpo.optimizer")
    }
}

/// `(r − mean) / std` with the population standard deviation; all zeros when
/// the spread is below `sigma_floor`.
pub fn group_advantages(rewards: &[f64], sigma_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantage normalisation needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std >= sigma_floor) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `π_new(y|x) / π_old(y|x)` from sequence log-probabilities.
pub fn ratio_from_log_probs(lp_new: f64, lp_old: f64) -> Result<f64> {
    if !(lp_new.is_finite() && lp_old.is_finite()) {
        return Err(Error::NonFinite("log-probability in ratio"));
    }
    Ok((lp_new - lp_old).exp())
}

pub fn probability_ratio(
    params_new: &PolicyParams,
    params_old: &PolicyParams,
    grammar: Grammar,
    prompt: &[TokenId],
    candidate: &SequenceSample,
) -> Result<f64> {
    let new = sequence_log_prob(params_new, grammar, prompt, &candidate.tokens, candidate.truncated)?;
    let old = sequence_log_prob(params_old, grammar, prompt, &candidate.tokens, candidate.truncated)?;
    ratio_from_log_probs(new, old)
}

/// `u − log u − 1` with `u = π_ref / π_θ`, given `log u`.
pub fn kl_from_log_ratio(log_u: f64) -> Result<f64> {
    let u = log_u.exp();
    if !(log_u.is_finite() && u.is_finite()) {
        return Err(Error::NonFinite("KL ratio"));
    }
    Ok((u - log_u - 1.0).max(0.0))
}

pub fn kl_estimate(
    params_new: &PolicyParams,
    params_ref: &PolicyParams,
    grammar: Grammar,
    prompt: &[TokenId],
    candidate: &SequenceSample,
) -> Result<f64> {
    let new = sequence_log_prob(params_new, grammar, prompt, &candidate.tokens, candidate.truncated)?;
    let reference = sequence_log_prob(params_ref, grammar, prompt, &candidate.tokens, candidate.truncated)?;
    kl_from_log_ratio(reference - new)
}

/// Clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)` and whether the clipped
/// branch is strictly the smaller one (no gradient through ρ).
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Candidates decoded for one query under a frozen snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub query: String,
    pub prompt: Vec<TokenId>,
    pub samples: Vec<SequenceSample>,
    /// Sequence log-probabilities under the sampling snapshot.
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    pub loss: Loss,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

/// `−(1/N) Σ_i [min(ρ_i A_i, clip(ρ_i) A_i) − β KL_i]` for one group.
pub fn grpo_loss(
    params: &PolicyParams,
    grammar: Grammar,
    group: &CandidateGroup,
    params_ref: &PolicyParams,
    config: &RlConfig,
) -> Result<GrpoLoss> {
    let n = group.samples.len();
    if n < 2 || group.old_log_probs.len() != n || group.advantages.len() != n {
        return Err(Error::InvalidArgument(format!(
            "candidate group for {:?} is inconsistent",
            group.query
        )));
    }
    let nf = n as f64;
    let (mut total, mut kl_sum, mut clipped_count) = (0.0, 0.0, 0usize);
    let mut graph = LossGraph::default();
    for ((s, &lp_old), &adv) in group.samples.iter().zip(&group.old_log_probs).zip(&group.advantages) {
        let lp = sequence_log_prob(params, grammar, &group.prompt, &s.tokens, s.truncated)?;
        let lp_ref = sequence_log_prob(params_ref, grammar, &group.prompt, &s.tokens, s.truncated)?;
        let ratio = ratio_from_log_probs(lp, lp_old)?;
        let log_u = lp_ref - lp;
        let kl = kl_from_log_ratio(log_u)?;
        let (surrogate, clipped) = clipped_surrogate(ratio, adv, config.clip_eps);
        total += surrogate - config.kl_beta * kl;
        kl_sum += kl;
        clipped_count += usize::from(clipped);
        // d/dlp of the bracket: ρA on the active unclipped branch, and
        // −β(1 − u) from the KL term
        let d_surrogate = if clipped { 0.0 } else { ratio * adv };
        let d_kl = 1.0 - log_u.exp();
        let coeff = -(d_surrogate - config.kl_beta * d_kl) / nf;
        graph.push(LossTerm {
            grammar,
            prompt: group.prompt.clone(),
            tokens: s.tokens.clone(),
            truncated: s.truncated,
            full_weight: coeff,
            tag_weight: coeff,
        });
    }
    Ok(GrpoLoss {
        loss: Loss {
            value: -total / nf,
            graph,
        },
        mean_kl: kl_sum / nf,
        clip_fraction: clipped_count as f64 / nf,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub malformed_fraction: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "step\tmean_reward\tmean_kl\tclip_fraction\tmalformed_fraction";

impl StepDiagnostics {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.mean_reward, self.mean_kl, self.clip_fraction, self.malformed_fraction
        )
    }
}

/// Averages group losses over the batch and applies one descent step.
pub fn grpo_update(
    params: &mut PolicyParams,
    grammar: Grammar,
    groups: &[CandidateGroup],
    params_ref: &PolicyParams,
    config: &RlConfig,
    optimizer: &mut Sgd,
) -> Result<(f64, f64, f64)> {
    if groups.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let scale = 1.0 / groups.len() as f64;
    let mut graph = LossGraph::default();
    let (mut loss, mut kl, mut clip) = (0.0, 0.0, 0.0);
    for g in groups {
        let l = grpo_loss(params, grammar, g, params_ref, config)?;
        loss += l.loss.value * scale;
        kl += l.mean_kl * scale;
        clip += l.clip_fraction * scale;
        graph.extend(l.loss.graph.scaled(scale));
    }
    let (_, grad) = value_and_backward(params, &graph)?;
    optimizer.step(params, &grad);
    Ok((loss, kl, clip))
}

/// Decodes a candidate group for one query under `snapshot`.
pub fn decode_group(
    snapshot: &Policy,
    query: &str,
    config: &RlConfig,
    rng_key: (u64, &str),
) -> Result<(Vec<TokenId>, Vec<SequenceSample>)> {
    let prompt = snapshot.prompt(query);
    let scorer = PolicyScorer::new(&snapshot.params, snapshot.grammar, &prompt)?;
    let samples = if config.stochastic {
        let mut rng = seed::keyed(rng_key.0, "rl-sampling", rng_key.1);
        (0..config.group_size).map(|_| sample(&scorer, config.max_len, &mut rng)).collect()
    } else {
        beam_search(&scorer, config.group_size, config.max_len)
    };
    Ok((prompt, samples))
}

/// Fusion breakdowns for decoded outputs; engine failures name the query.
pub fn score_outputs(
    engine: &SearchEngine,
    ctx: &QueryContext,
    outputs: &[RewriteOutput],
    reward_config: &RewardConfig,
) -> Result<Vec<RewardBreakdown>> {
    outputs
        .iter()
        .map(|o| {
            fusion_reward(engine, ctx, o, reward_config).map_err(|e| match e {
                Error::Reward { .. } => e,
                other => Error::Reward {
                    query: ctx.query.clone(),
                    source: Box::new(other),
                },
            })
        })
        .collect()
}

/// One on-policy step: snapshot π_old, decode groups, score, normalise and
/// take a single gradient step.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    policy: &mut Policy,
    reference: &PolicyParams,
    batch: &[&QueryContext],
    engine: &SearchEngine,
    reward_config: &RewardConfig,
    config: &RlConfig,
    optimizer: &mut Sgd,
    step: usize,
    seed: u64,
) -> Result<StepDiagnostics> {
    let snapshot = policy.clone();
    let mut groups = Vec::with_capacity(batch.len());
    let (mut reward_sum, mut malformed, mut count) = (0.0, 0usize, 0usize);
    for ctx in batch {
        if ctx.recall.is_empty() {
            return Err(Error::Reward {
                query: ctx.query.clone(),
                source: Box::new(Error::UnretrievableQuery),
            });
        }
        let key = format!("{step}:{}", ctx.query);
        let (prompt, samples) = decode_group(&snapshot, &ctx.query, config, (seed, &key))?;
        let outputs: Vec<RewriteOutput> = samples.iter().map(|s| snapshot.parse(s)).collect();
        let breakdowns = score_outputs(engine, ctx, &outputs, reward_config)?;
        let rewards: Vec<f64> = breakdowns.iter().map(|b| config.reward.select(b)).collect();
        reward_sum += rewards.iter().sum::<f64>();
        malformed += outputs.iter().filter(|o| !o.well_formed).count();
        count += outputs.len();
        if samples.len() < 2 {
            continue;
        }
        let advantages = group_advantages(&rewards, config.sigma_floor)?;
        let old_log_probs = samples.iter().map(|s| s.log_prob).collect();
        groups.push(CandidateGroup {
            query: ctx.query.clone(),
            prompt,
            samples,
            old_log_probs,
            rewards,
            advantages,
        });
    }
    let (loss, mean_kl, clip_fraction) =
        grpo_update(&mut policy.params, policy.grammar, &groups, reference, config, optimizer)?;
    let c = count.max(1) as f64;
    Ok(StepDiagnostics {
        step,
        loss,
        mean_reward: reward_sum / c,
        mean_kl,
        clip_fraction,
        malformed_fraction: malformed as f64 / c,
    })
}

/// Reward contexts for RL records, dropping queries the engine cannot
/// retrieve anything for.
pub fn query_contexts(engine: &SearchEngine, records: &[RlRecord]) -> (Vec<QueryContext>, usize) {
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let ctx = QueryContext::new(engine, &r.query, r.click_set());
        if ctx.recall.is_empty() {
            dropped += 1;
        } else {
            out.push(ctx);
        }
    }
    (out, dropped)
}

#[derive(Debug, Clone)]
pub struct GrpoOutcome {
    pub policy: Policy,
    pub diagnostics: Vec<StepDiagnostics>,
    pub dropped_queries: usize,
}

/// GRPO from an SFT checkpoint, which also serves as the frozen reference.
pub fn train_grpo(
    config: &RlConfig,
    sft: &Policy,
    records: &[RlRecord],
    engine: &SearchEngine,
    reward_config: &RewardConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepDiagnostics, &Policy) -> Result<()>,
) -> Result<GrpoOutcome> {
    config.validate()?;
    reward_config.validate()?;
    if sft.grammar != Grammar::Tagged {
        return Err(Error::InvalidArgument("GRPO needs a tagged policy".into()));
    }
    let (contexts, dropped) = query_contexts(engine, records);
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("no retrievable RL queries".into()));
    }
    let reference = sft.params.clone();
    let mut policy = sft.clone();
    let mut optimizer = Sgd::new(config.optimizer, policy.params.len());
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    let mut diagnostics = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(contexts.len()) {
            if order.is_empty() {
                epoch += 1;
                order = (0..contexts.len()).collect();
                order.shuffle(&mut seed::keyed(seed, "training", &format!("grpo-epoch-{epoch}")));
                order.reverse();
            }
            batch.push(&contexts[order.pop().expect("refilled above")]);
        }
        let diag = grpo_step(
            &mut policy,
            &reference,
            &batch,
            engine,
            reward_config,
            config,
            &mut optimizer,
            step,
            seed,
        )?;
        on_step(&diag, &policy)?;
        diagnostics.push(diag);
    }
    Ok(GrpoOutcome {
        policy,
        diagnostics,
        dropped_queries: dropped,
    })
}

// ---------------------------------------------------------------------------
// Pairwise preference baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub candidates: usize,
    /// Negatives are drawn from this many lowest-reward candidates.
    pub bottom_pool: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub optimizer: SgdConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            candidates: 10,
            bottom_pool: 5,
            negatives: 2,
            epochs: 3,
            batch_size: 16,
            max_len: 8,
            optimizer: SgdConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("dpo.beta must be > 0".into()));
        }
        if self.negatives == 0 || self.negatives > self.bottom_pool || self.bottom_pool >= self.candidates {
            return Err(Error::Config(
                "dpo needs 1 <= negatives <= bottom_pool < candidates".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("dpo.epochs and dpo.batch_size must be >= 1".into()));
        }
        self.optimizer.validate("dpo.optimizer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoPair {
    pub query: String,
    pub prompt: Vec<TokenId>,
    pub positive: SequenceSample,
    pub negative: SequenceSample,
    pub positive_reward: f64,
    pub negative_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DpoPairs {
    pub pairs: Vec<DpoPair>,
    pub skipped_short: usize,
    pub skipped_flat: usize,
}

/// Per query: best-reward candidate against negatives drawn from the
/// lowest-reward ones.
pub fn build_dpo_pairs(
    sft: &Policy,
    records: &[RlRecord],
    engine: &SearchEngine,
    reward_config: &RewardConfig,
    config: &DpoConfig,
    seed: u64,
) -> Result<DpoPairs> {
    config.validate()?;
    let (contexts, _) = query_contexts(engine, records);
    let mut out = DpoPairs::default();
    for ctx in &contexts {
        let prompt = sft.prompt(&ctx.query);
        let scorer = PolicyScorer::new(&sft.params, sft.grammar, &prompt)?;
        let samples = beam_search(&scorer, config.candidates, config.max_len);
        if samples.len() < config.candidates {
            out.skipped_short += 1;
            continue;
        }
        let outputs: Vec<RewriteOutput> = samples.iter().map(|s| sft.parse(s)).collect();
        let rewards: Vec<f64> = score_outputs(engine, ctx, &outputs, reward_config)?
            .iter()
            .map(|b| b.r_fusion)
            .collect();
        if rewards.iter().all(|r| *r == rewards[0]) {
            out.skipped_flat += 1;
            continue;
        }
        // stable: equal rewards keep beam order
        let mut ranked: Vec<usize> = (0..samples.len()).collect();
        ranked.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
        let best = ranked[0];
        let mut bottom: Vec<usize> = ranked[ranked.len() - config.bottom_pool..].to_vec();
        bottom.shuffle(&mut seed::keyed(seed, "dpo-negatives", &ctx.query));
        for &neg in bottom.iter().take(config.negatives) {
            out.pairs.push(DpoPair {
                query: ctx.query.clone(),
                prompt: prompt.clone(),
                positive: samples[best].clone(),
                negative: samples[neg].clone(),
                positive_reward: rewards[best],
                negative_reward: rewards[neg],
            });
        }
    }
    Ok(out)
}

/// `softplus(x) = log(1 + eˣ)`, stable for large `|x|`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `−log σ(β · [(lp⁺ − ref⁺) − (lp⁻ − ref⁻)])`.
pub fn dpo_loss(params: &PolicyParams, params_ref: &PolicyParams, grammar: Grammar, batch: &[DpoPair], beta: f64) -> Result<Loss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty DPO batch".into()));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut graph = LossGraph::default();
    for pair in batch {
        let lp = |p: &PolicyParams, s: &SequenceSample| sequence_log_prob(p, grammar, &pair.prompt, &s.tokens, s.truncated);
        let margin = (lp(params, &pair.positive)? - lp(params_ref, &pair.positive)?)
            - (lp(params, &pair.negative)? - lp(params_ref, &pair.negative)?);
        total += softplus(-beta * margin);
        let d_margin = -beta * sigmoid(-beta * margin) / n;
        for (s, w) in [(&pair.positive, d_margin), (&pair.negative, -d_margin)] {
            graph.push(LossTerm {
                grammar,
                prompt: pair.prompt.clone(),
                tokens: s.tokens.clone(),
                truncated: s.truncated,
                full_weight: w,
                tag_weight: w,
            });
        }
    }
    Ok(Loss {
        value: total / n,
        graph,
    })
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub policy: Policy,
    pub epoch_losses: Vec<f64>,
    pub pairs: DpoPairs,
}

pub fn train_dpo(
    config: &DpoConfig,
    sft: &Policy,
    records: &[RlRecord],
    engine: &SearchEngine,
    reward_config: &RewardConfig,
    seed: u64,
) -> Result<DpoOutcome> {
    let pairs = build_dpo_pairs(sft, records, engine, reward_config, config, seed)?;
    let mut policy = sft.clone();
    let mut epoch_losses = Vec::new();
    if pairs.pairs.is_empty() {
        return Ok(DpoOutcome {
            policy,
            epoch_losses,
            pairs,
        });
    }
    let mut optimizer = Sgd::new(config.optimizer, policy.params.len());
    let mut order: Vec<usize> = (0..pairs.pairs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut seed::keyed(seed, "training", &format!("dpo-epoch-{epoch}")));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DpoPair> = chunk.iter().map(|&i| pairs.pairs[i].clone()).collect();
            let loss = dpo_loss(&policy.params, &sft.params, policy.grammar, &batch, config.beta)?;
            let (_, grad) = value_and_backward(&policy.params, &loss.graph)?;
            optimizer.step(&mut policy.params, &grad);
            sum += loss.value;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(DpoOutcome {
        policy,
        epoch_losses,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::vocab::{BOS, EOS, RW, SEP, TAG0, TAG1};
    use proptest::prelude::*;

    #[test]
    fn advantages_examples() {
        assert_eq!(group_advantages(&[2.0, 2.0, 2.0], 1e-8).unwrap(), vec![0.0; 3]);
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        assert!((a[0] + 1.2247).abs() < 1e-4 && a[1].abs() < 1e-12 && (a[2] - 1.2247).abs() < 1e-4);
        assert!(group_advantages(&[1.0], 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn advantages_shift_and_scale_invariant(
            r in proptest::collection::vec(-5.0f64..5.0, 2..12),
            c in 0.1f64..10.0,
            k in -3.0f64..3.0,
        ) {
            let base = group_advantages(&r, 1e-8).unwrap();
            prop_assume!(base.iter().any(|a| *a != 0.0));
            let scaled: Vec<f64> = r.iter().map(|x| x * c + k).collect();
            let other = group_advantages(&scaled, 1e-8).unwrap();
            for (a, b) in base.iter().zip(&other) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_from_log_ratio(0.0).unwrap(), 0.0);
        let v = kl_from_log_ratio(2f64.ln()).unwrap();
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-12 && (v - 0.3069).abs() < 1e-4);
        assert!(kl_from_log_ratio(f64::NAN).is_err());
    }

    #[test]
    fn clip_saturation() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (1.2, true));
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, false));
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), (-0.8, true));
        assert_eq!(clipped_surrogate(1.1, 2.0, 0.2), (1.1 * 2.0, false));
    }

    fn toy_group(params: &PolicyParams, adv: Vec<f64>) -> CandidateGroup {
        let prompt = vec![BOS, 9, 12, RW];
        let samples: Vec<SequenceSample> = [
            (vec![10, SEP, TAG1, EOS], false),
            (vec![11, 13, SEP, TAG0, EOS], false),
            (vec![14, 15, 16, EOS], true),
        ]
        .into_iter()
        .map(|(tokens, truncated)| {
            let log_prob = sequence_log_prob(params, Grammar::Tagged, &prompt, &tokens, truncated).unwrap();
            SequenceSample {
                tokens,
                log_prob,
                source: crate::policy::SampleSource::Beam,
                truncated,
            }
        })
        .collect();
        CandidateGroup {
            query: "q".into(),
            prompt,
            old_log_probs: samples.iter().map(|s| s.log_prob).collect(),
            samples,
            rewards: vec![0.0; 3],
            advantages: adv,
        }
    }

    #[test]
    fn zero_advantage_at_reference_is_zero_loss() {
        let p = PolicyParams::random(20, 8, 4, 1.0);
        let g = toy_group(&p, vec![0.0; 3]);
        let l = grpo_loss(&p, Grammar::Tagged, &g, &p, &RlConfig::default()).unwrap();
        assert_eq!(l.loss.value, 0.0);
        assert_eq!(l.mean_kl, 0.0);
        assert!(crate::policy::backward(&p, &l.loss.graph).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn huge_beta_anchors_only_once_the_policy_has_moved() {
        let reference = PolicyParams::random(20, 8, 4, 1.0);
        let group = toy_group(&reference, vec![1.2, -0.3, -0.9]);
        let grad = |params: &PolicyParams, kl_beta: f64| {
            let config = RlConfig { kl_beta, ..RlConfig::default() };
            let l = grpo_loss(params, Grammar::Tagged, &group, &reference, &config).unwrap();
            crate::policy::backward(params, &l.loss.graph).unwrap()
        };

        // at the reference the KL gradient vanishes, so the first update is
        // the same for every beta rather than shrinking to zero
        let (free, pinned) = (grad(&reference, 0.0), grad(&reference, 1e4));
        assert!(free.iter().map(|g| g.abs()).fold(0.0, f64::max) > 1e-3);
        for (a, b) in free.iter().zip(&pinned) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        let mut moved = reference.clone();
        for (i, x) in moved.values.iter_mut().enumerate() {
            *x += 0.05 * ((i * 7919) % 13) as f64 / 13.0 - 0.025;
        }
        let kl_of = |params: &PolicyParams| {
            let l = grpo_loss(params, Grammar::Tagged, &group, &reference, &RlConfig::default()).unwrap();
            l.mean_kl
        };
        let (free, unit, pinned) = (grad(&moved, 0.0), grad(&moved, 1.0), grad(&moved, 1e4));
        // the loss is affine in beta and the KL part dominates
        for ((f, u), p) in free.iter().zip(&unit).zip(&pinned) {
            assert!((p - f - 1e4 * (u - f)).abs() <= 1e-6 * (1.0 + p.abs()));
        }
        let norm = pinned.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut stepped = moved.clone();
        stepped.add_scaled(&pinned, -1e-3 / norm);
        assert!(kl_of(&stepped) < kl_of(&moved));
    }

    #[test]
    fn update_matches_enumerated_policy_gradient() {
        let grammar = Grammar::Free { eos: 2 };
        let prompt = vec![0, 1];
        let params = PolicyParams::random(3, 2, 11, 1.5);

        let mut all = Vec::new();
        let mut frontier = vec![Vec::new()];
        while let Some(prefix) = frontier.pop() {
            for t in 0..3 {
                let mut seq: Vec<TokenId> = prefix.clone();
                seq.push(t);
                if t == 2 {
                    let lp = sequence_log_prob(&params, grammar, &prompt, &seq, false).unwrap();
                    all.push((lp, seq));
                } else if seq.len() < 2 {
                    frontier.push(seq);
                }
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top: Vec<(f64, Vec<TokenId>)> = all.into_iter().take(2).collect();

        let rewards: Vec<f64> = top.iter().map(|(_, s)| s.iter().filter(|t| **t == 0).count() as f64 + 0.5 * s.len() as f64).collect();
        let mean = rewards.iter().sum::<f64>() / 2.0;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        let adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / std).collect();

        let h = 1e-6;
        let lr = 0.1;
        let mut expected = params.clone();
        for k in 0..params.len() {
            let mut g = 0.0;
            for ((_, seq), a) in top.iter().zip(&adv) {
                let at = |x: f64| {
                    let mut p = params.clone();
                    p.values[k] += x;
                    sequence_log_prob(&p, grammar, &prompt, seq, false).unwrap()
                };
                g -= a * (at(h) - at(-h)) / (2.0 * h) / 2.0;
            }
            expected.values[k] -= lr * g;
        }

        let group = CandidateGroup {
            query: "q".into(),
            prompt: prompt.clone(),
            samples: top
                .iter()
                .map(|(lp, seq)| SequenceSample {
                    tokens: seq.clone(),
                    log_prob: *lp,
                    source: crate::policy::SampleSource::Beam,
                    truncated: false,
                })
                .collect(),
            old_log_probs: top.iter().map(|(lp, _)| *lp).collect(),
            rewards: rewards.clone(),
            advantages: group_advantages(&rewards, 1e-8).unwrap(),
        };
        let config = RlConfig {
            optimizer: SgdConfig { learning_rate: lr, momentum: 0.0, clip_norm: 0.0 },
            ..RlConfig::default()
        };
        let mut updated = params.clone();
        let mut sgd = Sgd::new(config.optimizer, params.len());
        grpo_update(&mut updated, grammar, &[group], &params, &config, &mut sgd).unwrap();
        assert!(updated.max_abs_diff(&params) > 1e-4);
        assert!(updated.max_abs_diff(&expected) < 1e-10, "{}", updated.max_abs_diff(&expected));
    }

    #[test]
    fn ratio_identity_and_dpo_zero_margin() {
        let p = PolicyParams::random(20, 8, 4, 1.0);
        let g = toy_group(&p, vec![0.0; 3]);
        for s in &g.samples {
            assert_eq!(probability_ratio(&p, &p, Grammar::Tagged, &g.prompt, s).unwrap(), 1.0);
            assert_eq!(kl_estimate(&p, &p, Grammar::Tagged, &g.prompt, s).unwrap(), 0.0);
        }
        let pair = DpoPair {
            query: "q".into(),
            prompt: g.prompt.clone(),
            positive: g.samples[0].clone(),
            negative: g.samples[1].clone(),
            positive_reward: 1.0,
            negative_reward: 0.0,
        };
        let l = dpo_loss(&p, &p, Grammar::Tagged, &[pair], 0.5).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dpo_loss_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for m in [-2.0, -0.5, 0.0, 0.5, 2.0, 10.0] {
            let v = softplus(-0.7 * m);
            assert!(v < prev);
            prev = v;
        }
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0).is_finite());
    }
}
