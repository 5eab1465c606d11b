//! Length-bounded beam search, greedy and sampled decoding, and output
//! parsing.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{position_log_probs, Grammar, Phase, PositionKind};
use super::params::PolicyParams;
use super::vocab::{TokenId, Vocab, SEP, TAG0, TAG1};
use crate::dataset::Tag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Beam,
    Greedy,
    Sampled,
    TeacherForced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// Output tokens including the terminating EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub source: SampleSource,
    /// Hit the length limit; the final EOS was appended, not generated.
    pub truncated: bool,
}

pub enum Step<S> {
    Continue(S),
    /// The sequence is complete, optionally with a structural token appended.
    Finish { append: Option<TokenId> },
}

/// Incremental next-token scorer driven by the decoders.
pub trait StepScorer {
    type State: Clone;
    fn start(&self) -> Self::State;
    /// Log-probabilities over the vocabulary; `-inf` marks forbidden tokens.
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, token: TokenId) -> Step<Self::State>;
    fn eos(&self) -> TokenId;
}

struct Hyp<S> {
    state: S,
    tokens: Vec<TokenId>,
    score: f64,
}

fn by_score_then_tokens(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search without length normalisation.
///
/// Every step scores all one-token extensions of the active hypotheses and
/// keeps the best `beam_size`; completed ones move to a separate pool.
/// Hypotheses still open after `max_len` tokens are closed with a forced EOS
/// and flagged. Returns the best `beam_size` completed sequences by raw
/// log-probability, ties broken by token sequence.
pub fn beam_search<S: StepScorer>(scorer: &S, beam_size: usize, max_len: usize) -> Vec<SequenceSample> {
    let beam_size = beam_size.max(1);
    let mut active = vec![Hyp {
        state: scorer.start(),
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut pool: Vec<SequenceSample> = Vec::new();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut cands: Vec<(usize, TokenId, f64, Vec<TokenId>)> = Vec::new();
        for (i, hyp) in active.iter().enumerate() {
            for (tok, lp) in scorer.log_probs(&hyp.state).into_iter().enumerate() {
                if lp.is_finite() {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok as TokenId);
                    cands.push((i, tok as TokenId, hyp.score + lp, tokens));
                }
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens((a.2, &a.3), (b.2, &b.3)));
        cands.truncate(beam_size);
        let mut next = Vec::with_capacity(cands.len());
        for (i, tok, score, mut tokens) in cands {
            match scorer.advance(&active[i].state, tok) {
                Step::Continue(state) => next.push(Hyp { state, tokens, score }),
                Step::Finish { append } => {
                    tokens.extend(append);
                    pool.push(SequenceSample {
                        tokens,
                        log_prob: score,
                        source: SampleSource::Beam,
                        truncated: false,
                    });
                }
            }
        }
        active = next;
        pool.sort_by(|a, b| by_score_then_tokens((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
        pool.truncate(beam_size);
        // scores only decrease, so a full pool beating every open beam is final
        if pool.len() == beam_size {
            let worst = pool[beam_size - 1].log_prob;
            if active.iter().all(|h| h.score < worst) {
                active.clear();
            }
        }
    }
    for hyp in active {
        let mut tokens = hyp.tokens;
        tokens.push(scorer.eos());
        pool.push(SequenceSample {
            tokens,
            log_prob: hyp.score,
            source: SampleSource::Beam,
            truncated: true,
        });
    }
    pool.sort_by(|a, b| by_score_then_tokens((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
    pool.truncate(beam_size);
    pool
}

fn decode_with<S: StepScorer>(
    scorer: &S,
    max_len: usize,
    source: SampleSource,
    mut choose: impl FnMut(&[f64]) -> TokenId,
) -> SequenceSample {
    let mut state = scorer.start();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lps = scorer.log_probs(&state);
        let tok = choose(&lps);
        score += lps[tok as usize];
        tokens.push(tok);
        match scorer.advance(&state, tok) {
            Step::Continue(s) => state = s,
            Step::Finish { append } => {
                tokens.extend(append);
                return SequenceSample {
                    tokens,
                    log_prob: score,
                    source,
                    truncated: false,
                };
            }
        }
    }
    tokens.push(scorer.eos());
    SequenceSample {
        tokens,
        log_prob: score,
        source,
        truncated: true,
    }
}

/// Argmax at every step, lowest id on ties.
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> SequenceSample {
    decode_with(scorer, max_len, SampleSource::Greedy, |lps| {
        let mut best = 0;
        for (i, lp) in lps.iter().enumerate() {
            if *lp > lps[best] {
                best = i;
            }
        }
        best as TokenId
    })
}

/// Ancestral sampling.
pub fn sample<S: StepScorer>(scorer: &S, max_len: usize, rng: &mut impl Rng) -> SequenceSample {
    decode_with(scorer, max_len, SampleSource::Sampled, |lps| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, lp) in lps.iter().enumerate() {
            if !lp.is_finite() {
                continue;
            }
            last = i;
            acc += lp.exp();
            if u < acc {
                return i as TokenId;
            }
        }
        last as TokenId
    })
}

/// Scores the policy's next tokens under an output grammar.
pub struct PolicyScorer<'a> {
    params: &'a PolicyParams,
    grammar: Grammar,
    drive: Vec<f64>,
    h0: Vec<f64>,
}

impl<'a> PolicyScorer<'a> {
    pub fn new(params: &'a PolicyParams, grammar: Grammar, prompt: &[TokenId]) -> Result<Self> {
        params.check_ids(prompt)?;
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let drive = params.context_drive(&params.context(prompt));
        let h0 = params.run(prompt, &drive);
        Ok(Self {
            params,
            grammar,
            drive,
            h0,
        })
    }
}

impl StepScorer for PolicyScorer<'_> {
    type State = (Vec<f64>, Phase);

    fn start(&self) -> Self::State {
        (self.h0.clone(), Phase::Rewrite)
    }

    fn log_probs(&self, (h, phase): &Self::State) -> Vec<f64> {
        let logits = self.params.logits(h);
        let kind = if *phase == Phase::Tag {
            PositionKind::Tag
        } else {
            PositionKind::Full
        };
        let lps = position_log_probs(&logits, kind);
        if lps.iter().any(|x| x.is_nan()) {
            // non-finite weights: nothing is decodable
            return vec![f64::NEG_INFINITY; lps.len()];
        }
        lps
    }

    fn advance(&self, (h, phase): &Self::State, token: TokenId) -> Step<Self::State> {
        match self.grammar.transition(*phase, token) {
            Some((_, Phase::Done)) | None => Step::Finish { append: None },
            Some((_, Phase::AwaitEos)) => Step::Finish {
                append: Some(self.grammar.eos()),
            },
            Some((_, next)) => Step::Continue((self.params.cell(h, token, &self.drive), next)),
        }
    }

    fn eos(&self) -> TokenId {
        self.grammar.eos()
    }
}

/// A decoded sequence split into rewrite and tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutput {
    pub rewrite: String,
    pub rewrite_ids: Vec<TokenId>,
    pub tag: Option<Tag>,
    pub well_formed: bool,
    pub log_prob: f64,
    pub truncated: bool,
}

/// Splits a sequence at SEP and validates it. Never fails: garbage is flagged
/// as malformed.
///
/// Tagged outputs are well formed iff they read `w+ <|sep|> tag <eos>` with
/// only vocabulary words before SEP; rewrite-only outputs read
/// `w+ <|sep|> <eos>`.
pub fn parse_output(sample: &SequenceSample, vocab: &Vocab, grammar: Grammar) -> RewriteOutput {
    let toks = &sample.tokens;
    let eos = grammar.eos();
    let sep_count = toks.iter().filter(|&&t| t == SEP).count();
    let body_end = toks.iter().position(|&t| t == SEP || t == eos).unwrap_or(toks.len());
    let rewrite_ids = toks[..body_end].to_vec();
    let after: &[TokenId] = if body_end < toks.len() && toks[body_end] == SEP {
        &toks[body_end + 1..]
    } else {
        &[]
    };
    let tag = match after.first() {
        Some(&TAG0) => Some(Tag::Irrelevant),
        Some(&TAG1) => Some(Tag::Relevant),
        _ => None,
    };
    let clean_body = !rewrite_ids.is_empty() && rewrite_ids.iter().all(|&t| !Vocab::is_special(t));
    let tail_ok = match grammar {
        Grammar::Tagged => tag.is_some() && after.len() == 2 && after[1] == eos,
        Grammar::RewriteOnly => after == [eos],
        Grammar::Free { .. } => false,
    };
    let well_formed = !sample.truncated && sep_count == 1 && clean_body && tail_ok;
    RewriteOutput {
        rewrite: vocab.decode(&rewrite_ids),
        rewrite_ids,
        tag: if grammar == Grammar::Tagged { tag } else { None },
        well_formed,
        log_prob: sample.log_prob,
        truncated: sample.truncated,
    }
}

/// Token sequence for a well-formed output.
pub fn render_output(rewrite_ids: &[TokenId], tag: Option<Tag>, grammar: Grammar) -> Vec<TokenId> {
    let mut out = rewrite_ids.to_vec();
    out.push(SEP);
    if let (Grammar::Tagged, Some(t)) = (grammar, tag) {
        out.push(if t == Tag::Relevant { TAG1 } else { TAG0 });
    }
    out.push(grammar.eos());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::sequence_log_prob;
    use crate::policy::vocab::{BOS, EOS, RW};

    fn sample(tokens: Vec<TokenId>) -> SequenceSample {
        SequenceSample {
            tokens,
            log_prob: -1.0,
            source: SampleSource::Beam,
            truncated: false,
        }
    }

    #[test]
    fn parse_examples() {
        let v = Vocab::from_words(["r1", "r2"]);
        let (r1, r2) = (v.id("r1"), v.id("r2"));
        let out = parse_output(&sample(vec![r1, r2, SEP, TAG1, EOS]), &v, Grammar::Tagged);
        assert_eq!(out.rewrite, "r1 r2");
        assert_eq!(out.tag, Some(Tag::Relevant));
        assert!(out.well_formed);
        let out = parse_output(&sample(vec![r1, r2, EOS]), &v, Grammar::Tagged);
        assert!(!out.well_formed);
        assert_eq!(out.tag, None);
        let out = parse_output(&sample(vec![r1, SEP, SEP, TAG1, EOS]), &v, Grammar::Tagged);
        assert!(!out.well_formed);
        assert!(!parse_output(&sample(vec![SEP, TAG0, EOS]), &v, Grammar::Tagged).well_formed);
        assert!(!parse_output(&sample(vec![r1, BOS, SEP, TAG0, EOS]), &v, Grammar::Tagged).well_formed);
        assert!(parse_output(&sample(vec![r1, SEP, EOS]), &v, Grammar::RewriteOnly).well_formed);
        let mut t = sample(vec![r1, r2, SEP, TAG1, EOS]);
        t.truncated = true;
        assert!(!parse_output(&t, &v, Grammar::Tagged).well_formed);
        assert!(!parse_output(&sample(vec![]), &v, Grammar::Tagged).well_formed);
    }

    #[test]
    fn parse_is_idempotent_on_rendering() {
        let v = Vocab::from_words(["a", "b"]);
        let out = parse_output(&sample(vec![v.id("a"), v.id("b"), SEP, TAG0, EOS]), &v, Grammar::Tagged);
        let again = parse_output(
            &sample(render_output(&out.rewrite_ids, out.tag, Grammar::Tagged)),
            &v,
            Grammar::Tagged,
        );
        assert_eq!(again, out);
    }

    #[test]
    fn beam_log_probs_match_teacher_forcing() {
        let p = PolicyParams::random(20, 8, 9, 1.5);
        let prompt = vec![BOS, 10, 12, RW];
        let scorer = PolicyScorer::new(&p, Grammar::Tagged, &prompt).unwrap();
        let beams = beam_search(&scorer, 6, 6);
        assert_eq!(beams.len(), 6);
        for w in beams.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
        for b in &beams {
            let lp = sequence_log_prob(&p, Grammar::Tagged, &prompt, &b.tokens, b.truncated).unwrap();
            assert_eq!(lp, b.log_prob);
            assert!(b.log_prob <= 0.0);
        }
        let g = greedy(&scorer, 6);
        let b1 = beam_search(&scorer, 1, 6);
        assert_eq!(b1[0].tokens, g.tokens);
        assert_eq!(b1[0].log_prob, g.log_prob);
    }
}
