//! Supervised fine-tuning: joint rewrite likelihood plus tag cross-entropy,
//! and the rewrite-only baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{QueryRewritePair, TaggedExample};
use crate::error::{Error, Result};
use crate::optim::{Sgd, SgdConfig};
use crate::policy::model::{score_tokens, PositionKind};
use crate::policy::{target_tokens, value_and_backward, Grammar, Loss, LossGraph, LossTerm, Policy};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Weight of the tag cross-entropy against the rewrite likelihood.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub hidden: usize,
    /// Multiplier on the initial weight range.
    pub init_scale: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 60,
            batch_size: 16,
            optimizer: SgdConfig {
                learning_rate: 0.02,
                momentum: 0.9,
                clip_norm: 5.0,
            },
            hidden: 32,
            init_scale: 1.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("sft.lambda must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("sft.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("sft.hidden must be >= 1".into()));
        }
        self.optimizer.validate("sft.optimizer")
    }
}

/// Which objective a run optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SftTask {
    MultiTask,
    SingleTask,
}

impl SftTask {
    pub fn grammar(self) -> Grammar {
        match self {
            SftTask::MultiTask => Grammar::Tagged,
            SftTask::SingleTask => Grammar::RewriteOnly,
        }
    }
}

/// Batch-mean loss with its two parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SftLoss {
    pub loss: Loss,
    pub nll: f64,
    pub bce: f64,
}

/// Mean over the batch of `−Σ log π(y_i | y_<i, x) − λ log p(t | x, y)`.
///
/// The likelihood covers rewrite tokens through SEP; the tag position
/// belongs to the cross-entropy term alone.
pub fn multi_task_loss(policy: &Policy, batch: &[TaggedExample], lambda: f64) -> Result<SftLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let (mut total, mut nll_sum, mut bce_sum) = (0.0, 0.0, 0.0);
    let mut graph = LossGraph::default();
    for ex in batch {
        let prompt = policy.prompt(&ex.query);
        let tokens = target_tokens(&policy.vocab, Grammar::Tagged, &ex.rewrite, Some(ex.tag))?;
        let (nll, bce) = nll_and_bce(policy, Grammar::Tagged, &prompt, &tokens)?;
        total += nll + lambda * bce;
        nll_sum += nll;
        bce_sum += bce;
        graph.push(LossTerm {
            grammar: Grammar::Tagged,
            prompt,
            tokens,
            truncated: false,
            full_weight: -1.0 / n,
            tag_weight: -lambda / n,
        });
    }
    Ok(SftLoss {
        loss: Loss {
            value: total / n,
            graph,
        },
        nll: nll_sum / n,
        bce: bce_sum / n,
    })
}

/// Rewrite likelihood only; no tag in the targets.
pub fn single_task_loss(policy: &Policy, batch: &[QueryRewritePair]) -> Result<SftLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut graph = LossGraph::default();
    for ex in batch {
        let prompt = policy.prompt(&ex.query);
        let tokens = target_tokens(&policy.vocab, Grammar::RewriteOnly, &ex.rewrite, None)?;
        let (nll, _) = nll_and_bce(policy, Grammar::RewriteOnly, &prompt, &tokens)?;
        total += nll;
        graph.push(LossTerm {
            grammar: Grammar::RewriteOnly,
            prompt,
            tokens,
            truncated: false,
            full_weight: -1.0 / n,
            tag_weight: 0.0,
        });
    }
    Ok(SftLoss {
        loss: Loss {
            value: total / n,
            graph,
        },
        nll: total / n,
        bce: 0.0,
    })
}

fn nll_and_bce(policy: &Policy, grammar: Grammar, prompt: &[u32], tokens: &[u32]) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut bce = 0.0;
    for pos in score_tokens(&policy.params, grammar, prompt, tokens, false)? {
        match pos.kind {
            PositionKind::Full => nll -= pos.log_prob,
            PositionKind::Tag => bce -= pos.log_prob,
            PositionKind::Forced => {}
        }
    }
    Ok((nll, bce))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub nll: f64,
}

pub const LOG_HEADER: &str = "epoch\tloss\ttagging_bce\trewrite_nll";

impl EpochLog {
    pub fn tsv(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6}", self.epoch, self.loss, self.bce, self.nll)
    }
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub policy: Policy,
    pub curve: Vec<EpochLog>,
}

/// Mini-batch gradient descent over shuffled epochs. `on_epoch` sees the
/// policy after every epoch (checkpointing, logging).
pub fn train_sft(
    config: &SftConfig,
    task: SftTask,
    examples: &[TaggedExample],
    mut policy: Policy,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &Policy) -> Result<()>,
) -> Result<SftOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty SFT dataset".into()));
    }
    policy.grammar = task.grammar();
    let mut opt = Sgd::new(config.optimizer, policy.params.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut seed::keyed(seed, "training", &format!("sft-epoch-{epoch}")));
        let (mut loss_sum, mut nll_sum, mut bce_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TaggedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            };
            let l = match task {
                SftTask::MultiTask => multi_task_loss(&policy, &batch, config.lambda),
                SftTask::SingleTask => {
                    let pairs: Vec<QueryRewritePair> = batch.iter().map(TaggedExample::pair).collect();
                    single_task_loss(&policy, &pairs)
                }
            }
            .map_err(diverged)?;
            if !l.loss.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: l.loss.value,
                });
            }
            let (_, grad) = value_and_backward(&policy.params, &l.loss.graph).map_err(diverged)?;
            // the graph holds Σ w log p; its gradient is already d(loss)/dθ
            opt.step(&mut policy.params, &grad);
            if !policy.params.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            loss_sum += l.loss.value;
            nll_sum += l.nll;
            bce_sum += l.bce;
            batches += 1;
        }
        let b = batches as f64;
        let log = EpochLog {
            epoch,
            loss: loss_sum / b,
            nll: nll_sum / b,
            bce: bce_sum / b,
        };
        on_epoch(&log, &policy)?;
        curve.push(log);
    }
    Ok(SftOutcome { policy, curve })
}
