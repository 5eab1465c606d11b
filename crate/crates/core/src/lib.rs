//! Multi-task query rewriting with relevance tagging, trained against an
//! offline BM25 search engine and aligned with group-relative policy
//! optimization.

pub mod catalog;
pub mod config;
pub mod clicks;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod index;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod relevance;
pub mod reward;
pub mod rl;
pub mod seed;
pub mod serving;
pub mod sft;

pub use error::{Error, Result};
