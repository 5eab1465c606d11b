use std::collections::{BTreeSet, HashMap};

use crate::catalog::tokenize;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;
pub const TAG0: TokenId = 5;
pub const TAG1: TokenId = 6;
/// Ends the prompt; the rewrite starts after it.
pub const RW: TokenId = 7;

pub const SPECIALS: [&str; 8] = ["<pad>", "<unk>", "<bos>", "<eos>", "<|sep|>", "<tag0>", "<tag1>", "<rw>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocab {
    /// Specials first, then the given words in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("specials are unique")
    }

    /// `size` ids: the specials plus synthetic words `w0, w1, ...`.
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= SPECIALS.len(), "vocab smaller than the special set");
        Self::from_words((0..size - SPECIALS.len()).map(|i| format!("w{i:03}")))
    }

    /// Rebuilds a vocabulary from its full ordered listing.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Malformed("vocabulary must start with the special tokens".into()));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.lookup.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined rendering; ids outside the vocabulary render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Prompt encoding: `BOS query... RW`.
    pub fn prompt(&self, query: &str) -> Vec<TokenId> {
        let mut p = vec![BOS];
        p.extend(self.encode(query));
        p.push(RW);
        p
    }
}
