//! Sparse (TF·IDF, BM25) and dense (feature hashing + MIPS) retrieval.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fact_store::FactId;

pub mod dense;
pub mod mips;
pub mod sparse;
pub mod text;

pub use dense::{hash_encode, stop_vector, DenseVector, EncoderRole};
pub use mips::{IndexMode, MipsIndex};
pub use sparse::{bm25_rank, tfidf_rank, Bm25Index, TfidfIndex};
pub use text::tokenize;

/// A retrievable action: a fact or the STOP sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Fact(FactId),
    Stop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Fact(id) => write!(f, "{}", id.0),
            Action::Stop => f.write_str("STOP"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub action: Action,
    pub score: f64,
}

impl ScoredHit {
    pub fn fact(id: FactId, score: f64) -> Self {
        Self {
            action: Action::Fact(id),
            score,
        }
    }
}

/// Descending score, then ascending action (facts by id, STOP last).
pub(crate) fn sort_hits(hits: &mut [ScoredHit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.action.cmp(&b.action)));
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
