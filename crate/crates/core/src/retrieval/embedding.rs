use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{tokenize, top_k, Candidate, Result, RetrievalError};
use crate::num::Scalar;

/// Unit-norm dense vectors keyed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<F> {
    dim: usize,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    data: Vec<F>,
}

fn normalize<F: Scalar>(v: &mut [F]) -> F {
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    if norm > F::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

impl<F: Scalar> EmbeddingIndex<F> {
    /// Builds an index, L2-normalizing every vector.
    pub fn from_vectors<I, S>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<F>)>,
        S: Into<String>,
    {
        let mut index = Self {
            dim: 0,
            ids: Vec::new(),
            positions: HashMap::new(),
            data: Vec::new(),
        };
        for (id, v) in vectors {
            index.push(id.into(), v)?;
        }
        Ok(index)
    }

    fn push(&mut self, id: String, mut v: Vec<F>) -> Result<()> {
        if self.ids.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite(id));
        }
        if normalize(&mut v) == F::zero() {
            return Err(RetrievalError::ZeroVector(id));
        }
        if self.positions.contains_key(&id) {
            return Err(RetrievalError::DuplicateId(id));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[F]> {
        let &i = self.positions.get(id)?;
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Restricts the index to `ids`, in the given order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let vectors = ids
            .iter()
            .map(|id| {
                let id = id.as_ref();
                self.vector(id)
                    .map(|v| (id.to_string(), v.to_vec()))
                    .ok_or_else(|| RetrievalError::MissingId(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vectors(vectors)
    }

    /// Top-`k` ids by cosine similarity to `query`. A zero query scores every
    /// entry 0.
    pub fn topk(&self, query: &[F], k: usize) -> Result<Vec<Candidate<F>>> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut q = query.to_vec();
        normalize(&mut q);
        let scored = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let row = &self.data[i * self.dim..(i + 1) * self.dim];
                let dot = row.iter().zip(&q).map(|(&a, &b)| a * b).sum::<F>();
                (id.clone(), dot)
            })
            .collect();
        Ok(top_k(scored, k))
    }
}

/// Reads `id v1 v2 ... vd` records (whitespace separated, one per line) and
/// checks that every id in `expected` is present.
pub fn load_embeddings<F: Scalar, S: AsRef<str>>(
    path: impl AsRef<Path>,
    expected: &[S],
) -> Result<EmbeddingIndex<F>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let values = parts
            .map(|p| {
                p.parse::<f64>().map(F::of).map_err(|e| RetrievalError::Malformed {
                    line: idx + 1,
                    reason: format!("{p:?}: {e}"),
                })
            })
            .collect::<Result<Vec<F>>>()?;
        records.push((id.to_string(), values));
    }
    let index = EmbeddingIndex::from_vectors(records)?;
    let present: HashSet<&str> = index.ids.iter().map(String::as_str).collect();
    for id in expected {
        if !present.contains(id.as_ref()) {
            return Err(RetrievalError::MissingId(id.as_ref().to_string()));
        }
    }
    Ok(index)
}

/// Deterministic bag-of-words embedder for tests and encoder-free runs.
///
/// Each token from [`tokenize`] is hashed with SHA-256; the first eight
/// bytes pick a bucket and the next byte a sign. Token-free text maps to the
/// last basis vector so every output is non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashEmbedder {
    pub fn embed<F: Scalar>(&self, text: &str) -> Vec<F> {
        let mut v = vec![F::zero(); self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            v[self.dim - 1] = F::one();
            return v;
        }
        for t in tokens {
            let d = Sha256::digest(t.as_bytes());
            let mut b = [0u8; 8];
            b.copy_from_slice(&d[..8]);
            let bucket = (u64::from_le_bytes(b) % self.dim as u64) as usize;
            let sign = if d[8] & 1 == 0 { F::one() } else { -F::one() };
            v[bucket] = v[bucket] + sign;
        }
        if v.iter().all(|x| *x == F::zero()) {
            v[self.dim - 1] = F::one();
        }
        v
    }
}
