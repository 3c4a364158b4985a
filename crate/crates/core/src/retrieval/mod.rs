//! Candidate selection over a demonstration pool: BM25 word overlap,
//! embedding nearest neighbours, and seeded random sampling.

mod bm25;
mod embedding;
mod random;

use std::cmp::Ordering;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

pub use bm25::{build_bm25, Bm25Index, Bm25Params};
pub use embedding::{load_embeddings, EmbeddingIndex, HashEmbedder};
pub use random::{derive_seed, random_sample};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("example \"{id}\" has no field \"{field}\"")]
    MissingField { id: String, field: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("embedding for \"{0}\" is missing")]
    MissingId(String),
    #[error("embedding for \"{0}\" appears twice")]
    DuplicateId(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding for \"{0}\" has non-finite values")]
    NonFinite(String),
    #[error("embedding for \"{0}\" is the zero vector")]
    ZeroVector(String),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

/// A pool example proposed by a retriever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<F> {
    pub id: String,
    pub score: F,
    /// 0-based position in the retriever's result list.
    pub rank: usize,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sorts by descending score, then ascending id, keeps `k`, assigns ranks.
pub(crate) fn top_k<F: Scalar>(mut scored: Vec<(String, F)>, k: usize) -> Vec<Candidate<F>> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
        .into_iter()
        .enumerate()
        .map(|(rank, (id, score))| Candidate { id, score, rank })
        .collect()
}

/// Where query vectors for nearest-neighbour retrieval come from.
#[derive(Debug, Clone)]
pub enum QueryVectors<F> {
    /// Precomputed vectors looked up by example id.
    Table(EmbeddingIndex<F>),
    /// Computed on the fly from the query text.
    Embedder(HashEmbedder),
}

/// A retrieval stage bound to one pool.
#[derive(Debug, Clone)]
pub enum Retriever<F> {
    Bm25(Bm25Index<F>),
    Knn {
        index: EmbeddingIndex<F>,
        queries: QueryVectors<F>,
    },
    Random { pool: Vec<String>, seed: u64 },
}

impl<F: Scalar> Retriever<F> {
    /// Top-`k` pool candidates for the query example, never including the
    /// query's own id.
    pub fn retrieve(&self, query_id: &str, query_text: &str, k: usize) -> Result<Vec<Candidate<F>>> {
        let raw = match self {
            Retriever::Bm25(index) => index.topk(query_text, k + 1),
            Retriever::Knn { index, queries } => {
                let v = match queries {
                    QueryVectors::Table(table) => table
                        .vector(query_id)
                        .ok_or_else(|| RetrievalError::MissingId(query_id.to_string()))?
                        .to_vec(),
                    QueryVectors::Embedder(e) => e.embed(query_text),
                };
                index.topk(&v, k + 1)?
            }
            Retriever::Random { pool, seed } => {
                let ids: Vec<&str> = pool
                    .iter()
                    .map(String::as_str)
                    .filter(|id| *id != query_id)
                    .collect();
                return Ok(random_sample(&ids, k, derive_seed(*seed, query_id)));
            }
        };
        Ok(raw
            .into_iter()
            .filter(|c| c.id != query_id)
            .take(k)
            .enumerate()
            .map(|(rank, c)| Candidate { rank, ..c })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Good-movie, BAD movie!"), ["good", "movie", "bad", "movie"]);
        assert!(tokenize(" ,. ").is_empty());
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_id() {
        let c = top_k(
            vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)],
            5,
        );
        let ids: Vec<_> = c.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(c[2].rank, 2);
    }

    #[test]
    fn retriever_excludes_query() {
        let index = Bm25Index::<f64>::from_documents(
            [("0", "good movie"), ("1", "bad movie"), ("2", "good fun")],
            Bm25Params::default(),
        )
        .unwrap();
        let r = Retriever::Bm25(index);
        let got = r.retrieve("0", "good movie", 2).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|c| c.id != "0"));
        assert_eq!(got[0].rank, 0);

        let r = Retriever::<f64>::Random {
            pool: vec!["0".into(), "1".into(), "2".into()],
            seed: 1,
        };
        let got = r.retrieve("1", "", 5).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|c| c.id != "1"));
    }
}
