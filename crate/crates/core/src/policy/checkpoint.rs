//! Text checkpoint format.
//!
//! ```text
//! qralign-checkpoint 1
//! grammar tagged|rewrite-only|free:<eos>
//! hidden <d>
//! vocab <V>
//! <one token per line>
//! params <count>
//! <one value per line>
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so loading a saved
//! checkpoint reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use super::model::Grammar;
use super::params::PolicyParams;
use super::vocab::Vocab;
use super::Policy;
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub const MAGIC: &str = "qralign-checkpoint";
pub const VERSION: u32 = 1;

fn grammar_name(g: Grammar) -> String {
    match g {
        Grammar::Tagged => "tagged".into(),
        Grammar::RewriteOnly => "rewrite-only".into(),
        Grammar::Free { eos } => format!("free:{eos}"),
    }
}

fn parse_grammar(s: &str) -> Option<Grammar> {
    match s {
        "tagged" => Some(Grammar::Tagged),
        "rewrite-only" => Some(Grammar::RewriteOnly),
        _ => s.strip_prefix("free:")?.parse().ok().map(|eos| Grammar::Free { eos }),
    }
}

pub fn to_text(policy: &Policy) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "grammar {}", grammar_name(policy.grammar));
    let _ = writeln!(out, "hidden {}", policy.params.hidden());
    let _ = writeln!(out, "vocab {}", policy.vocab.len());
    for t in policy.vocab.tokens() {
        let _ = writeln!(out, "{t}");
    }
    let _ = writeln!(out, "params {}", policy.params.len());
    for v in &policy.params.values {
        let _ = writeln!(out, "{v:?}");
    }
    out
}

pub fn from_text(text: &str) -> Result<Policy> {
    let bad = |why: String| Error::Malformed(why);
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key} line")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
    };
    let version = header(MAGIC)?;
    if version != VERSION.to_string() {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let grammar = header("grammar")?;
    let grammar = parse_grammar(&grammar).ok_or_else(|| bad(format!("unknown grammar {grammar:?}")))?;
    let parse_usize = |s: String, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} {s:?}")));
    let hidden = parse_usize(header("hidden")?, "hidden size")?;
    let vsize = parse_usize(header("vocab")?, "vocab size")?;
    drop(header);
    let tokens: Vec<String> = lines.by_ref().take(vsize).map(str::to_string).collect();
    if tokens.len() != vsize {
        return Err(bad("truncated vocabulary".into()));
    }
    let vocab = Vocab::from_tokens(tokens)?;
    let count_line = lines.next().ok_or_else(|| bad("missing params line".into()))?;
    let count = count_line
        .strip_prefix("params ")
        .and_then(|c| c.parse::<usize>().ok())
        .ok_or_else(|| bad(format!("bad params line {count_line:?}")))?;
    let values = lines
        .by_ref()
        .take(count)
        .map(|l| l.parse::<f64>().map_err(|_| bad(format!("bad value {l:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != count {
        return Err(bad("truncated parameter block".into()));
    }
    if lines.any(|l| !l.is_empty()) {
        return Err(bad("trailing data".into()));
    }
    let params = PolicyParams::from_values(vsize, hidden, values)?;
    Ok(Policy { vocab, params, grammar })
}

pub fn save(policy: &Policy, path: &Path) -> Result<String> {
    let text = to_text(policy);
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Loads a checkpoint; unreadable files are missing artifacts, unparsable
/// ones corrupt.
pub fn load(path: &Path) -> Result<Policy> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    from_text(&text).map_err(|e| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let vocab = Vocab::from_words(["bag", "kappa"]);
        let params = PolicyParams::random(vocab.len(), 4, 11, 1.0);
        let policy = Policy {
            vocab,
            params,
            grammar: Grammar::Tagged,
        };
        let back = from_text(&to_text(&policy)).unwrap();
        assert_eq!(back.vocab, policy.vocab);
        for (a, b) in back.params.values.iter().zip(&policy.params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(to_text(&back), to_text(&policy));
    }

    #[test]
    fn corruption_is_detected() {
        let policy = Policy {
            vocab: Vocab::from_words(["a"]),
            params: PolicyParams::zeros(9, 2),
            grammar: Grammar::RewriteOnly,
        };
        let text = to_text(&policy);
        assert!(from_text(&text.replace("qralign-checkpoint 1", "qralign-checkpoint 9")).is_err());
        assert!(from_text(&text[..text.len() - 6]).is_err());
        assert!(from_text(&text.replacen("0.0\n", "zz\n", 1)).is_err());
        assert!(from_text(&format!("{text}junk\n")).is_err());
    }
}
