//! Language-model scoring: per-token negative log-likelihoods in nats.
//!
//! Two backends ship: an additive-smoothed n-gram model trained in process
//! and an HTTP client for completion servers that echo prompt log-probabilities.
//! Any scorer can be wrapped in a persistent cache.

mod cache;
mod ngram;
mod remote;
mod stub;

use std::ops::Range;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

pub use cache::{CachedScorer, ScoreCache};
pub use ngram::{ngram_train, NgramConfig, NgramModel, UniformScorer, START_SYMBOL};
pub use remote::{LogBase, RemoteConfig, RemoteScorer, ENDPOINT_ENV, API_KEY_ENV};
pub use stub::{StubMode, StubScript, StubServer};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
    #[error("context \"{0}\" never seen in training and smoothing is zero")]
    UnseenContext(String),
    #[error("token \"{0}\" has zero probability")]
    ZeroProbability(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server answered {status}: {body}")]
    Http { status: u16, body: String },
    #[error("prompt exceeds the backend context window: {0}")]
    ContextOverflow(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("non-finite score for {0:?}")]
    NonFinite(String),
    #[error("cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ScoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ReferenceNgram,
    Uniform,
    RemoteHttp,
}

/// One token of a scored text.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore<F> {
    pub text: String,
    /// Byte span within the scored text. Spans of consecutive tokens touch
    /// and together cover the text.
    pub span: Range<usize>,
    pub nll: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore<F> {
    pub tokens: Vec<TokenScore<F>>,
    pub total: F,
}

impl<F: Scalar> SequenceScore<F> {
    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            total: F::zero(),
        }
    }

    /// Sums token nlls in order.
    pub fn from_tokens(tokens: Vec<TokenScore<F>>) -> Self {
        let total = tokens.iter().fold(F::zero(), |acc, t| acc + t.nll);
        Self { tokens, total }
    }

    /// Length-normalized total; zero for an empty sequence.
    pub fn mean(&self) -> F {
        if self.tokens.is_empty() {
            F::zero()
        } else {
            self.total / F::of_count(self.tokens.len() as u64)
        }
    }
}

/// Summed nll of a continuation given a prefix, and how many tokens it spans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationScore<F> {
    pub nll: F,
    pub tokens: usize,
}

impl<F: Scalar> ContinuationScore<F> {
    pub fn mean(&self) -> F {
        if self.tokens == 0 {
            F::zero()
        } else {
            self.nll / F::of_count(self.tokens as u64)
        }
    }
}

/// An inference model that assigns per-token log-probabilities.
pub trait Scorer<F: Scalar>: Send + Sync {
    fn model_id(&self) -> &str;

    fn kind(&self) -> BackendKind;

    fn score_sequence(&self, text: &str) -> Result<SequenceScore<F>>;

    /// nll of `continuation` following `prefix`.
    ///
    /// The default subtracts two full-sequence scores, which does not depend
    /// on where the backend tokenizer puts the seam.
    fn score_continuation(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore<F>> {
        if prefix.is_empty() {
            let s = self.score_sequence(continuation)?;
            return Ok(ContinuationScore {
                nll: s.total,
                tokens: s.tokens.len(),
            });
        }
        let joint = self.score_sequence(&format!("{prefix}{continuation}"))?;
        let head = self.score_sequence(prefix)?;
        Ok(ContinuationScore {
            nll: joint.total - head.total,
            tokens: joint.tokens.len().saturating_sub(head.tokens.len()),
        })
    }

    /// Greedy completion of `prompt`, for generation tasks.
    fn generate(&self, _prompt: &str, _max_tokens: usize, _stop: &str) -> Result<String> {
        Err(ScoreError::Unsupported("generation"))
    }
}

pub type ScorerHandle<F> = Arc<dyn Scorer<F>>;

macro_rules! forward_scorer {
    ($($ty:ty),*) => {$(
        impl<F: Scalar, S: Scorer<F> + ?Sized> Scorer<F> for $ty {
            fn model_id(&self) -> &str {
                (**self).model_id()
            }
            fn kind(&self) -> BackendKind {
                (**self).kind()
            }
            fn score_sequence(&self, text: &str) -> Result<SequenceScore<F>> {
                (**self).score_sequence(text)
            }
            fn score_continuation(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore<F>> {
                (**self).score_continuation(prefix, continuation)
            }
            fn generate(&self, prompt: &str, max_tokens: usize, stop: &str) -> Result<String> {
                (**self).generate(prompt, max_tokens, stop)
            }
        }
    )*};
}

forward_scorer!(Arc<S>, Box<S>, &S);

/// Whitespace-delimited words with spans that absorb the preceding
/// whitespace; the last span also absorbs trailing whitespace.
pub(crate) fn word_spans(text: &str) -> Vec<(Range<usize>, &str)> {
    let mut out: Vec<(Range<usize>, &str)> = Vec::new();
    let mut start = 0;
    let mut word_start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), word_start) {
            (false, None) => word_start = Some(i),
            (true, Some(ws)) => {
                out.push((start..i, &text[ws..i]));
                start = i;
                word_start = None;
            }
            _ => {}
        }
    }
    if let Some(ws) = word_start {
        out.push((start..text.len(), &text[ws..]));
    } else if let Some(last) = out.last_mut() {
        last.0.end = text.len();
    }
    out
}
