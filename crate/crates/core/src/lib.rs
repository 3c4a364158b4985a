//! Demonstration selection for in-context learning.
//!
//! Candidates are retrieved from a labeled pool (BM25, embedding kNN or
//! random sampling) and reranked by the conditional entropy of the test
//! input given each candidate demonstration, measured by a pluggable
//! language-model scorer. The harness evaluates selection methods with
//! label-scoring classification and emits hypotheses for generation tasks.
//!
//! Numeric code is generic over [`num::Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`.

pub mod cone;
pub mod corpus;
pub mod harness;
pub mod inference;
pub mod num;
pub mod retrieval;
pub mod scoring;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Score(#[from] scoring::ScoreError),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("example {0:?} not found")]
    UnknownExample(String),
    #[error("template is not a {0} template")]
    WrongTaskKind(&'static str),
    #[error("{0}")]
    Accuracy(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub use cone::{ConeMode, Method, OrderPolicy, RetrieverKind};
pub use corpus::{Dataset, Example, Template};
pub use scoring::{Scorer, ScoreError};

pub type Candidate = retrieval::Candidate<f64>;
pub type Retriever = retrieval::Retriever<f64>;
pub type Bm25Index = retrieval::Bm25Index<f64>;
pub type Bm25Params = retrieval::Bm25Params<f64>;
pub type EmbeddingIndex = retrieval::EmbeddingIndex<f64>;
pub type TokenScore = scoring::TokenScore<f64>;
pub type SequenceScore = scoring::SequenceScore<f64>;
pub type ContinuationScore = scoring::ContinuationScore<f64>;
pub type ScorerHandle = scoring::ScorerHandle<f64>;
pub type ConeScore = cone::ConeScore<f64>;
pub type RankedCandidate = cone::RankedCandidate<f64>;
pub type Selection = cone::Selection<f64>;
