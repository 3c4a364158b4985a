use std::collections::{BTreeMap, HashMap};

use super::{tokenize, top_k, Candidate, Result, RetrievalError};
use crate::corpus::Dataset;
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params<F> {
    pub k1: F,
    pub b: F,
}

impl<F: Scalar> Default for Bm25Params<F> {
    fn default() -> Self {
        Self {
            k1: F::of(1.5),
            b: F::of(0.75),
        }
    }
}

impl<F: Scalar> Bm25Params<F> {
    pub fn new(k1: F, b: F) -> Result<Self> {
        if !(k1 >= F::zero() && b >= F::zero() && b <= F::one()) {
            return Err(RetrievalError::InvalidParams {
                k1: k1.as_f64(),
                b: b.as_f64(),
            });
        }
        Ok(Self { k1, b })
    }
}

/// Okapi BM25 over a fixed document set.
///
/// `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`, which stays non-negative
/// for every document frequency. Query terms count with multiplicity.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index<F> {
    params: Bm25Params<F>,
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<usize>,
    doc_freq: BTreeMap<String, usize>,
    avgdl: F,
}

/// Indexes `field` of every example in `corpus`.
pub fn build_bm25<F: Scalar>(
    corpus: &Dataset,
    field: &str,
    params: Bm25Params<F>,
) -> Result<Bm25Index<F>> {
    let docs = corpus
        .examples
        .iter()
        .map(|e| {
            e.field(field)
                .map(|t| (e.id.as_str(), t))
                .ok_or_else(|| RetrievalError::MissingField {
                    id: e.id.clone(),
                    field: field.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Bm25Index::from_documents(docs, params)
}

impl<F: Scalar> Bm25Index<F> {
    pub fn from_documents<I, S, T>(docs: I, params: Bm25Params<F>) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let params = Bm25Params::new(params.k1, params.b)?;
        let mut ids = Vec::new();
        let mut term_freqs = Vec::new();
        let mut doc_lens = Vec::new();
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        for (id, text) in docs {
            let tokens = tokenize(text.as_ref());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            ids.push(id.into());
            doc_lens.push(tokens.len());
            term_freqs.push(tf);
        }
        if ids.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let total: usize = doc_lens.iter().sum();
        let avgdl = F::of_count(total as u64) / F::of_count(ids.len() as u64);
        Ok(Self {
            params,
            ids,
            term_freqs,
            doc_lens,
            doc_freq,
            avgdl,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn params(&self) -> Bm25Params<F> {
        self.params
    }

    pub fn avgdl(&self) -> F {
        self.avgdl
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_lens[doc]
    }

    pub fn idf(&self, term: &str) -> F {
        let n = F::of_count(self.ids.len() as u64);
        let df = F::of_count(self.doc_freq(term) as u64);
        let half = F::of(0.5);
        (F::one() + (n - df + half) / (df + half)).ln()
    }

    /// BM25 score of document `doc` for already tokenized query terms.
    pub fn score_terms(&self, doc: usize, terms: &[String]) -> F {
        let Bm25Params { k1, b } = self.params;
        let dl = F::of_count(self.doc_lens[doc] as u64);
        let mut score = F::zero();
        for t in terms {
            let Some(&tf) = self.term_freqs[doc].get(t) else {
                continue;
            };
            let tf = F::of_count(tf as u64);
            let norm = k1 * (F::one() - b + b * dl / self.avgdl);
            score = score + self.idf(t) * tf * (k1 + F::one()) / (tf + norm);
        }
        score
    }

    /// Top-`k` documents for `query`; `k` larger than the corpus returns
    /// every document.
    pub fn topk(&self, query: &str, k: usize) -> Vec<Candidate<F>> {
        let terms = tokenize(query);
        let scored = (0..self.ids.len())
            .map(|d| (self.ids[d].clone(), self.score_terms(d, &terms)))
            .collect();
        top_k(scored, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;

    fn two_docs() -> Bm25Index<f64> {
        Bm25Index::from_documents([("0", "good movie"), ("1", "bad movie")], Bm25Params::default())
            .unwrap()
    }

    #[test]
    fn statistics_match_direct_count() {
        let idx = two_docs();
        assert_eq!(idx.doc_freq("movie"), 2);
        assert_eq!(idx.doc_freq("good"), 1);
        assert_eq!(idx.doc_freq("ugly"), 0);
        assert_eq!(idx.avgdl(), 2.0);
        let single =
            Bm25Index::<f64>::from_documents([("a", "one two three")], Bm25Params::default())
                .unwrap();
        assert_eq!(single.avgdl(), 3.0);
    }

    #[test]
    fn good_query_scores_ln_two() {
        let idx = two_docs();
        let top = idx.topk("good", 1);
        assert_eq!(top[0].id, "0");
        assert!((top[0].score - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_and_clipping() {
        let idx = two_docs();
        let c = idx.topk("zebra", 5);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.score == 0.0));
        assert_eq!(c[0].id, "0");
        assert_eq!(c[1].id, "1");
    }

    #[test]
    fn rebuild_is_identical() {
        assert_eq!(two_docs(), two_docs());
    }

    #[test]
    fn errors() {
        let empty: Vec<(&str, &str)> = vec![];
        assert!(matches!(
            Bm25Index::<f64>::from_documents(empty, Bm25Params::default()),
            Err(RetrievalError::EmptyCorpus)
        ));
        assert!(Bm25Params::new(1.0f64, 1.5).is_err());
        assert!(Bm25Params::new(-1.0f64, 0.5).is_err());
        let d = Dataset::from_examples("t", vec![Example::new("0").with_field("other", "x")]);
        assert!(matches!(
            build_bm25::<f64>(&d, "text", Bm25Params::default()),
            Err(RetrievalError::MissingField { .. })
        ));
    }

    #[test]
    fn f32_index_agrees() {
        let idx = Bm25Index::<f32>::from_documents(
            [("0", "good movie"), ("1", "bad movie")],
            Bm25Params::default(),
        )
        .unwrap();
        assert!((idx.topk("good", 1)[0].score - 2f32.ln()).abs() < 1e-6);
    }
}
