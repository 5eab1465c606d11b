//! Forward pass, teacher-forced scoring and the analytic backward pass of the
//! context-conditioned recurrent policy.
//!
//! The prompt is read token by token; the mean prompt embedding is also fed
//! to every step as a context vector:
//!
//! ```text
//! h_t = tanh(W_in e(x_t) + W_rec h_{t-1} + W_ctx c + b_h)
//! logits_t = W_out h_t + b_out
//! ```

use serde::{Deserialize, Serialize};

use super::params::{Block, PolicyParams};
use super::vocab::{TokenId, EOS, SEP, TAG0, TAG1};
use crate::error::{Error, Result};

/// Output grammar the policy decodes under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grammar {
    /// `rewrite <|sep|> tag <eos>`; the tag step is renormalised over the
    /// two tag tokens and the final EOS is structural.
    Tagged,
    /// `rewrite <|sep|> <eos>`; SEP ends the sequence.
    RewriteOnly,
    /// Plain language model terminated by `eos`.
    Free { eos: TokenId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Rewrite,
    Tag,
    AwaitEos,
    Done,
}

/// How a position's log-probability is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    /// Softmax over the whole vocabulary.
    Full,
    /// Softmax restricted to the two tag tokens.
    Tag,
    /// Structural token with probability one.
    Forced,
}

impl Grammar {
    pub fn eos(self) -> TokenId {
        match self {
            Grammar::Free { eos } => eos,
            _ => EOS,
        }
    }

    /// Kind of the emitted position and the phase after it, or `None` when
    /// the grammar forbids `token` here.
    pub fn transition(self, phase: Phase, token: TokenId) -> Option<(PositionKind, Phase)> {
        let eos = self.eos();
        match (self, phase) {
            (_, Phase::Done) => None,
            (_, Phase::AwaitEos) => (token == eos).then_some((PositionKind::Forced, Phase::Done)),
            (Grammar::Tagged, Phase::Tag) => {
                matches!(token, TAG0 | TAG1).then_some((PositionKind::Tag, Phase::AwaitEos))
            }
            (_, Phase::Tag) => None,
            (_, Phase::Rewrite) => {
                let next = if token == eos {
                    Phase::Done
                } else if token == SEP && self == Grammar::Tagged {
                    Phase::Tag
                } else if token == SEP && self == Grammar::RewriteOnly {
                    Phase::AwaitEos
                } else {
                    Phase::Rewrite
                };
                Some((PositionKind::Full, next))
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Log-probabilities of the two tag tokens renormalised between themselves.
pub fn tag_log_probs(logits: &[f64]) -> [f64; 2] {
    let (a, b) = (logits[TAG0 as usize], logits[TAG1 as usize]);
    let max = a.max(b);
    let lse = max + ((a - max).exp() + (b - max).exp()).ln();
    [a - lse, b - lse]
}

/// Log-probability vector for the next position in `kind`; disallowed tokens
/// are `-inf`.
pub fn position_log_probs(logits: &[f64], kind: PositionKind) -> Vec<f64> {
    match kind {
        PositionKind::Full => log_softmax(logits),
        PositionKind::Tag => {
            let mut out = vec![f64::NEG_INFINITY; logits.len()];
            let [l0, l1] = tag_log_probs(logits);
            out[TAG0 as usize] = l0;
            out[TAG1 as usize] = l1;
            out
        }
        PositionKind::Forced => vec![0.0; logits.len()],
    }
}

fn matvec_add(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += wᵀ g`.
fn matvec_t_add(w: &[f64], cols: usize, g: &[f64], out: &mut [f64]) {
    for (row, gi) in w.chunks_exact(cols).zip(g) {
        if *gi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += gi * a;
        }
    }
}

/// `w += g ⊗ x`.
fn outer_add(w: &mut [f64], cols: usize, g: &[f64], x: &[f64]) {
    for (row, gi) in w.chunks_exact_mut(cols).zip(g) {
        if *gi == 0.0 {
            continue;
        }
        for (a, xi) in row.iter_mut().zip(x) {
            *a += gi * xi;
        }
    }
}

impl PolicyParams {
    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    fn embedding(&self, id: TokenId) -> &[f64] {
        let d = self.hidden();
        let e = self.block(Block::Embedding);
        &e[id as usize * d..(id as usize + 1) * d]
    }

    /// Mean prompt embedding.
    pub fn context(&self, prompt: &[TokenId]) -> Vec<f64> {
        let d = self.hidden();
        let mut c = vec![0.0; d];
        if prompt.is_empty() {
            return c;
        }
        for &id in prompt {
            for (ci, ei) in c.iter_mut().zip(self.embedding(id)) {
                *ci += ei;
            }
        }
        let n = prompt.len() as f64;
        c.iter_mut().for_each(|x| *x /= n);
        c
    }

    /// `W_ctx c + b_h`, constant across the steps of one sequence.
    pub fn context_drive(&self, ctx: &[f64]) -> Vec<f64> {
        let mut out = self.block(Block::HiddenBias).to_vec();
        matvec_add(self.block(Block::ContextMix), self.hidden(), ctx, &mut out);
        out
    }

    pub fn cell(&self, h_prev: &[f64], token: TokenId, drive: &[f64]) -> Vec<f64> {
        let d = self.hidden();
        let mut z = drive.to_vec();
        matvec_add(self.block(Block::InputMix), d, self.embedding(token), &mut z);
        matvec_add(self.block(Block::RecurrentMix), d, h_prev, &mut z);
        z.iter_mut().for_each(|x| *x = x.tanh());
        z
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.block(Block::OutputBias).to_vec();
        matvec_add(self.block(Block::Output), self.hidden(), h, &mut out);
        out
    }

    /// Hidden state after reading `tokens` from the zero state.
    pub fn run(&self, tokens: &[TokenId], drive: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden()];
        for &t in tokens {
            h = self.cell(&h, t, drive);
        }
        h
    }

    /// Full softmax after reading `prompt` followed by `prefix`.
    pub fn next_token_distribution(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(prompt)?;
        self.check_ids(prefix)?;
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let drive = self.context_drive(&self.context(prompt));
        let mut h = self.run(prompt, &drive);
        for &t in prefix {
            h = self.cell(&h, t, &drive);
        }
        let logits = self.logits(&h);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(softmax(&logits))
    }

    /// `(p0, p1)`: the tag distribution after `rewrite <|sep|>`.
    pub fn tag_probability(&self, prompt: &[TokenId], rewrite: &[TokenId]) -> Result<(f64, f64)> {
        let mut prefix = rewrite.to_vec();
        prefix.push(SEP);
        self.check_ids(prompt)?;
        self.check_ids(&prefix)?;
        let drive = self.context_drive(&self.context(prompt));
        let mut h = self.run(prompt, &drive);
        for &t in &prefix {
            h = self.cell(&h, t, &drive);
        }
        let [l0, l1] = tag_log_probs(&self.logits(&h));
        if !(l0.is_finite() && l1.is_finite()) {
            return Err(Error::NonFinite("tag logits"));
        }
        Ok((l0.exp(), l1.exp()))
    }
}

/// One teacher-forced output position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPosition {
    pub token: TokenId,
    pub kind: PositionKind,
    pub log_prob: f64,
}

/// Assigns a kind to every output token. With `truncated`, the last token is
/// a forced terminator appended at the length limit.
pub fn position_kinds(grammar: Grammar, tokens: &[TokenId], truncated: bool) -> Result<Vec<PositionKind>> {
    let Some((&last, body)) = tokens.split_last() else {
        return Err(Error::Unterminated);
    };
    if last != grammar.eos() {
        return Err(Error::Unterminated);
    }
    let natural = if truncated { body } else { tokens };
    let mut phase = Phase::Rewrite;
    let mut kinds = Vec::with_capacity(tokens.len());
    for &t in natural {
        if phase == Phase::Done {
            return Err(Error::InvalidArgument("tokens after sequence end".into()));
        }
        let (kind, next) = grammar
            .transition(phase, t)
            .ok_or_else(|| Error::InvalidArgument(format!("token {t} not allowed in phase {phase:?}")))?;
        kinds.push(kind);
        phase = next;
    }
    if truncated {
        if phase == Phase::Done {
            return Err(Error::InvalidArgument("truncated flag on a finished sequence".into()));
        }
        kinds.push(PositionKind::Forced);
    } else if phase != Phase::Done {
        return Err(Error::Unterminated);
    }
    Ok(kinds)
}

/// Hidden states and per-position logits of one teacher-forced sequence.
struct Trace {
    inputs: Vec<TokenId>,
    ctx: Vec<f64>,
    hs: Vec<Vec<f64>>,
    /// (step index, target token, kind, logits) for non-forced positions.
    positions: Vec<(usize, TokenId, PositionKind, Vec<f64>)>,
    prompt_len: usize,
}

fn forward_trace(
    params: &PolicyParams,
    grammar: Grammar,
    prompt: &[TokenId],
    tokens: &[TokenId],
    truncated: bool,
) -> Result<Trace> {
    params.check_ids(prompt)?;
    params.check_ids(tokens)?;
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let kinds = position_kinds(grammar, tokens, truncated)?;
    let last_scored = kinds.iter().rposition(|k| *k != PositionKind::Forced);
    let steps = prompt.len() + last_scored.unwrap_or(0);
    let inputs: Vec<TokenId> = prompt.iter().chain(tokens).copied().take(steps).collect();
    let ctx = params.context(prompt);
    let drive = params.context_drive(&ctx);
    let mut hs: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let zero = vec![0.0; params.hidden()];
    for &x in &inputs {
        let h = params.cell(hs.last().unwrap_or(&zero), x, &drive);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hidden state"));
        }
        hs.push(h);
    }
    let mut positions = Vec::new();
    for (j, (&tok, &kind)) in tokens.iter().zip(&kinds).enumerate() {
        if kind == PositionKind::Forced {
            continue;
        }
        let step = prompt.len() - 1 + j;
        let logits = params.logits(&hs[step]);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        positions.push((step, tok, kind, logits));
    }
    Ok(Trace {
        inputs,
        ctx,
        hs,
        positions,
        prompt_len: prompt.len(),
    })
}

/// Teacher-forced per-position log-probabilities.
pub fn score_tokens(
    params: &PolicyParams,
    grammar: Grammar,
    prompt: &[TokenId],
    tokens: &[TokenId],
    truncated: bool,
) -> Result<Vec<ScoredPosition>> {
    let trace = forward_trace(params, grammar, prompt, tokens, truncated)?;
    let kinds = position_kinds(grammar, tokens, truncated)?;
    let mut scored_iter = trace.positions.iter();
    let mut out = Vec::with_capacity(tokens.len());
    for (&token, &kind) in tokens.iter().zip(&kinds) {
        let log_prob = match kind {
            PositionKind::Forced => 0.0,
            _ => {
                let (_, _, _, logits) = scored_iter.next().expect("one trace entry per scored position");
                position_log_probs(logits, kind)[token as usize]
            }
        };
        out.push(ScoredPosition { token, kind, log_prob });
    }
    Ok(out)
}

/// Sum of per-position log-probabilities, accumulated left to right.
pub fn sum_log_prob(positions: &[ScoredPosition]) -> f64 {
    positions.iter().fold(0.0, |acc, p| acc + p.log_prob)
}

pub fn sequence_log_prob(
    params: &PolicyParams,
    grammar: Grammar,
    prompt: &[TokenId],
    tokens: &[TokenId],
    truncated: bool,
) -> Result<f64> {
    let lp = sum_log_prob(&score_tokens(params, grammar, prompt, tokens, truncated)?);
    if !lp.is_finite() {
        return Err(Error::NonFinite("sequence log-probability"));
    }
    Ok(lp)
}

/// One weighted sequence in a loss: contributes
/// `full_weight · Σ log p(full positions) + tag_weight · log p(tag position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub grammar: Grammar,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub truncated: bool,
    pub full_weight: f64,
    pub tag_weight: f64,
}

/// Linearisation of a scalar loss in sequence log-probabilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGraph {
    pub terms: Vec<LossTerm>,
}

impl LossGraph {
    /// Graph of a loss that does not depend on the parameters.
    pub fn constant() -> Self {
        Self::default()
    }

    pub fn push(&mut self, term: LossTerm) {
        self.terms.push(term);
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for t in &mut self.terms {
            t.full_weight *= factor;
            t.tag_weight *= factor;
        }
        self
    }

    pub fn extend(&mut self, other: LossGraph) {
        self.terms.extend(other.terms);
    }
}

/// A scalar loss value together with its gradient graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub graph: LossGraph,
}

impl Loss {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            graph: LossGraph::constant(),
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            value: self.value * factor,
            graph: self.graph.scaled(factor),
        }
    }
}

/// Exact gradient of the graph's loss with respect to every parameter
/// (backpropagation through time).
pub fn backward(params: &PolicyParams, graph: &LossGraph) -> Result<Vec<f64>> {
    Ok(value_and_backward(params, graph)?.1)
}

/// The graph's linear value `Σ weight · log p` together with its gradient,
/// from a single forward pass per sequence.
pub fn value_and_backward(params: &PolicyParams, graph: &LossGraph) -> Result<(f64, Vec<f64>)> {
    let d = params.hidden();
    let v = params.vocab_size();
    let mut grad = vec![0.0; params.len()];
    let r_emb = params.range(Block::Embedding);
    let r_in = params.range(Block::InputMix);
    let r_ctx = params.range(Block::ContextMix);
    let r_rec = params.range(Block::RecurrentMix);
    let r_bh = params.range(Block::HiddenBias);
    let r_out = params.range(Block::Output);
    let r_bout = params.range(Block::OutputBias);
    let w_in = params.block(Block::InputMix);
    let w_ctx = params.block(Block::ContextMix);
    let w_rec = params.block(Block::RecurrentMix);
    let w_out = params.block(Block::Output);

    let mut value = 0.0;
    for term in &graph.terms {
        if term.full_weight == 0.0 && term.tag_weight == 0.0 {
            continue;
        }
        let trace = forward_trace(params, term.grammar, &term.prompt, &term.tokens, term.truncated)?;
        let steps = trace.hs.len();
        let mut dh = vec![vec![0.0; d]; steps];
        for (step, target, kind, logits) in &trace.positions {
            let w = match kind {
                PositionKind::Full => term.full_weight,
                _ => term.tag_weight,
            };
            if w == 0.0 {
                continue;
            }
            value += w * position_log_probs(logits, *kind)[*target as usize];
            let mut dlogits = vec![0.0; v];
            match kind {
                PositionKind::Full => {
                    for (g, p) in dlogits.iter_mut().zip(softmax(logits)) {
                        *g = -w * p;
                    }
                    dlogits[*target as usize] += w;
                }
                _ => {
                    let [l0, l1] = tag_log_probs(logits);
                    dlogits[TAG0 as usize] = -w * l0.exp();
                    dlogits[TAG1 as usize] = -w * l1.exp();
                    dlogits[*target as usize] += w;
                }
            }
            let h = &trace.hs[*step];
            outer_add(&mut grad[r_out.clone()], d, &dlogits, h);
            for (g, dl) in grad[r_bout.clone()].iter_mut().zip(&dlogits) {
                *g += dl;
            }
            matvec_t_add(w_out, d, &dlogits, &mut dh[*step]);
        }

        let mut ddrive = vec![0.0; d];
        for t in (0..steps).rev() {
            let dz: Vec<f64> = dh[t].iter().zip(&trace.hs[t]).map(|(g, h)| g * (1.0 - h * h)).collect();
            if dz.iter().all(|x| *x == 0.0) {
                continue;
            }
            let x = trace.inputs[t] as usize;
            let emb = &params.block(Block::Embedding)[x * d..(x + 1) * d];
            outer_add(&mut grad[r_in.clone()], d, &dz, emb);
            let emb_grad = &mut grad[r_emb.start + x * d..r_emb.start + (x + 1) * d];
            matvec_t_add(w_in, d, &dz, emb_grad);
            for (a, b) in ddrive.iter_mut().zip(&dz) {
                *a += b;
            }
            if t > 0 {
                outer_add(&mut grad[r_rec.clone()], d, &dz, &trace.hs[t - 1]);
                let (before, _) = dh.split_at_mut(t);
                matvec_t_add(w_rec, d, &dz, &mut before[t - 1]);
            }
        }
        for (g, dd) in grad[r_bh.clone()].iter_mut().zip(&ddrive) {
            *g += dd;
        }
        outer_add(&mut grad[r_ctx.clone()], d, &ddrive, &trace.ctx);
        let mut dctx = vec![0.0; d];
        matvec_t_add(w_ctx, d, &ddrive, &mut dctx);
        let n = trace.prompt_len as f64;
        for &p in &trace.inputs[..trace.prompt_len] {
            let p = p as usize;
            for (g, dc) in grad[r_emb.start + p * d..r_emb.start + (p + 1) * d].iter_mut().zip(&dctx) {
                *g += dc / n;
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((value, grad))
}
