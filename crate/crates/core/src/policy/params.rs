use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// All weights of the policy in one flat buffer.
///
/// Layout (row-major): token embedding `V×d`, input mixing `d×d`, context
/// mixing `d×d`, recurrent mixing `d×d`, hidden bias `d`, output projection
/// `V×d`, output bias `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    hidden: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Embedding,
    InputMix,
    ContextMix,
    RecurrentMix,
    HiddenBias,
    Output,
    OutputBias,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::Embedding,
        Block::InputMix,
        Block::ContextMix,
        Block::RecurrentMix,
        Block::HiddenBias,
        Block::Output,
        Block::OutputBias,
    ];
}

pub fn param_count(vocab_size: usize, hidden: usize) -> usize {
    let (v, d) = (vocab_size, hidden);
    2 * v * d + 3 * d * d + d + v
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            hidden,
            values: vec![0.0; param_count(vocab_size, hidden)],
        }
    }

    /// Uniform Glorot-style initialisation; biases start at zero.
    pub fn random(vocab_size: usize, hidden: usize, seed: u64, init_scale: f64) -> Self {
        let mut p = Self::zeros(vocab_size, hidden);
        let mut rng = seed::stream(seed, "init");
        for block in Block::ALL {
            let range = p.range(block);
            let limit = match block {
                Block::HiddenBias | Block::OutputBias => continue,
                Block::Embedding => init_scale,
                Block::Output => init_scale * (6.0 / (hidden + vocab_size) as f64).sqrt(),
                _ => init_scale * (3.0 / hidden as f64).sqrt(),
            };
            for x in &mut p.values[range] {
                *x = rng.gen_range(-limit..limit);
            }
        }
        p
    }

    pub fn from_values(vocab_size: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        let expected = param_count(vocab_size, hidden);
        if values.len() != expected {
            return Err(Error::Malformed(format!(
                "expected {expected} parameters for V={vocab_size} d={hidden}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self {
            vocab_size,
            hidden,
            values,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let (v, d) = (self.vocab_size, self.hidden);
        let sizes = [v * d, d * d, d * d, d * d, d, v * d, v];
        let idx = Block::ALL.iter().position(|b| *b == block).unwrap();
        let start: usize = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.values[self.range(block)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// `self += scale * delta`.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.values.len());
        for (p, g) in self.values.iter_mut().zip(delta) {
            *p += scale * g;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
