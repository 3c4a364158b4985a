//! Conditional-entropy reranking and demonstration selection.
//!
//! A candidate demonstration `c` is good for a test input `x` when the model
//! finds `x` unsurprising after reading `c`, i.e. when `H(x | c)` is small.
//! It is computed as `H(x, c) - H(c)`: the nll of `c ⊕ sep ⊕ x` minus the nll
//! of `c ⊕ sep`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, Slot, Template};
use crate::num::{mean_variance, Scalar};
use crate::retrieval::{Candidate, Retriever};
use crate::scoring::{ScoreError, Scorer};
use crate::{Error, Result};

/// Entropies in nats of one (context, input) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeScore<F> {
    /// nll of `c ⊕ sep ⊕ x`.
    pub joint: F,
    /// nll of `c ⊕ sep`; zero when `c` is empty.
    pub context: F,
    /// `joint - context`, up to rounding.
    pub conditional: F,
    /// Number of scorer tokens attributed to `x`.
    pub tokens: usize,
}

impl<F: Scalar> ConeScore<F> {
    /// Conditional entropy per token of `x`.
    pub fn per_token(&self) -> F {
        if self.tokens == 0 {
            F::zero()
        } else {
            self.conditional / F::of_count(self.tokens as u64)
        }
    }
}

/// Scores `x` after the context `c`. An empty `c` adds no separator, so the
/// result is the unconditional score of `x`.
pub fn conditional_entropy<F: Scalar, S: Scorer<F> + ?Sized>(
    scorer: &S,
    c: &str,
    x: &str,
    separator: &str,
) -> Result<ConeScore<F>> {
    let (joint, context) = if c.is_empty() {
        (scorer.score_sequence(x)?, None)
    } else {
        let ctx = format!("{c}{separator}");
        let joint = scorer.score_sequence(&format!("{ctx}{x}"))?;
        (joint, Some(scorer.score_sequence(&ctx)?))
    };
    let (h_ctx, ctx_tokens) = context
        .as_ref()
        .map(|s| (s.total, s.tokens.len()))
        .unwrap_or((F::zero(), 0));
    // When the joint text starts with exactly the context's tokens, sum the
    // remaining ones directly: equal up to rounding, but exact ties stay
    // exact. Otherwise the tokenizer merged across the seam; subtract.
    let aligned = context.as_ref().is_none_or(|ctx| {
        joint.tokens.len() >= ctx.tokens.len()
            && joint
                .tokens
                .iter()
                .zip(&ctx.tokens)
                .all(|(a, b)| a.text == b.text && a.nll == b.nll)
    });
    let conditional = if aligned {
        joint.tokens[ctx_tokens..]
            .iter()
            .fold(F::zero(), |acc, t| acc + t.nll)
    } else {
        joint.total - h_ctx
    };
    let score = ConeScore {
        joint: joint.total,
        context: h_ctx,
        conditional,
        tokens: joint.tokens.len().saturating_sub(ctx_tokens),
    };
    if !(score.joint.is_finite() && score.context.is_finite()) {
        return Err(ScoreError::NonFinite(x.to_string()).into());
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConeMode {
    /// Score every candidate alone as a one-shot context.
    #[default]
    PerCandidate,
    /// Grow the context one candidate at a time, each step adding the
    /// candidate that minimizes `H(x | context)`.
    GreedyGroup,
}

/// Arrangement of the selected demonstrations in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Best demonstration adjacent to the test input.
    #[default]
    BestLast,
    /// Best demonstration first, farthest from the test input.
    BestFirst,
    /// Ascending retrieval rank.
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrieverKind {
    Bm25,
    Knn,
    Random,
}

/// Demonstration selection methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Zero-shot.
    Prompting,
    Random,
    Bm25,
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "topk-cone")]
    TopKCone,
    Bm25Cone,
    RandomCone,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Prompting,
        Method::Random,
        Method::Bm25,
        Method::TopK,
        Method::TopKCone,
        Method::Bm25Cone,
        Method::RandomCone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Prompting => "prompting",
            Method::Random => "random",
            Method::Bm25 => "bm25",
            Method::TopK => "topk",
            Method::TopKCone => "topk-cone",
            Method::Bm25Cone => "bm25-cone",
            Method::RandomCone => "random-cone",
        }
    }

    pub fn retriever(self) -> Option<RetrieverKind> {
        match self {
            Method::Prompting => None,
            Method::Random | Method::RandomCone => Some(RetrieverKind::Random),
            Method::Bm25 | Method::Bm25Cone => Some(RetrieverKind::Bm25),
            Method::TopK | Method::TopKCone => Some(RetrieverKind::Knn),
        }
    }

    pub fn reranks(self) -> bool {
        matches!(self, Method::TopKCone | Method::Bm25Cone | Method::RandomCone)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

macro_rules! kebab_enum_str {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),*) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)*
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

kebab_enum_str!(ConeMode, "cone mode",
    ConeMode::PerCandidate => "per-candidate", ConeMode::GreedyGroup => "greedy-group");
kebab_enum_str!(OrderPolicy, "order policy",
    OrderPolicy::BestLast => "best-last", OrderPolicy::BestFirst => "best-first",
    OrderPolicy::Retrieval => "retrieval");
kebab_enum_str!(RetrieverKind, "retriever",
    RetrieverKind::Bm25 => "bm25", RetrieverKind::Knn => "knn", RetrieverKind::Random => "random");

/// A retrieved candidate together with its rendered demonstration text.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoCandidate<F> {
    pub candidate: Candidate<F>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate<F> {
    pub candidate: Candidate<F>,
    pub score: ConeScore<F>,
    /// 0-based position after reranking.
    pub cone_rank: usize,
}

fn cone_order<F: Scalar>(a: (&Candidate<F>, F), b: (&Candidate<F>, F)) -> Ordering {
    a.1.partial_cmp(&b.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.rank.cmp(&b.0.rank))
        .then_with(|| a.0.id.cmp(&b.0.id))
}

/// Sorts by ascending conditional entropy, then retrieval rank, then id, and
/// renumbers `cone_rank`.
pub fn sort_ranked<F: Scalar>(ranked: &mut [RankedCandidate<F>]) {
    ranked.sort_by(|a, b| {
        cone_order(
            (&a.candidate, a.score.conditional),
            (&b.candidate, b.score.conditional),
        )
    });
    for (i, r) in ranked.iter_mut().enumerate() {
        r.cone_rank = i;
    }
}

/// Reranks `candidates` by the conditional entropy they induce on `x`.
///
/// Per-candidate mode returns every candidate. Greedy-group mode runs
/// `steps` rounds (at most the number of candidates) and returns the
/// candidates in the order they were added; each new candidate is placed
/// farthest from `x` and its score is that of the grown context.
pub fn rank_candidates<F: Scalar, S: Scorer<F> + ?Sized>(
    scorer: &S,
    candidates: &[DemoCandidate<F>],
    x: &str,
    separator: &str,
    mode: ConeMode,
    steps: usize,
) -> Result<Vec<RankedCandidate<F>>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    match mode {
        ConeMode::PerCandidate => {
            let scores: Vec<ConeScore<F>> = candidates
                .par_iter()
                .map(|c| conditional_entropy(scorer, &c.text, x, separator))
                .collect::<Result<_>>()?;
            let mut ranked: Vec<RankedCandidate<F>> = candidates
                .iter()
                .zip(scores)
                .map(|(c, score)| RankedCandidate {
                    candidate: c.candidate.clone(),
                    score,
                    cone_rank: 0,
                })
                .collect();
            sort_ranked(&mut ranked);
            Ok(ranked)
        }
        ConeMode::GreedyGroup => {
            let mut remaining: Vec<&DemoCandidate<F>> = candidates.iter().collect();
            // Chosen texts in prompt order: latest pick first, best last.
            let mut chosen: Vec<&str> = Vec::new();
            let mut out = Vec::new();
            while out.len() < steps && !remaining.is_empty() {
                let scores: Vec<ConeScore<F>> = remaining
                    .par_iter()
                    .map(|c| {
                        let mut group: Vec<&str> = vec![c.text.as_str()];
                        group.extend(chosen.iter());
                        conditional_entropy(scorer, &group.join(separator), x, separator)
                    })
                    .collect::<Result<_>>()?;
                let best = (0..remaining.len())
                    .min_by(|&i, &j| {
                        cone_order(
                            (&remaining[i].candidate, scores[i].conditional),
                            (&remaining[j].candidate, scores[j].conditional),
                        )
                    })
                    .expect("remaining is non-empty");
                let pick = remaining.remove(best);
                chosen.insert(0, &pick.text);
                out.push(RankedCandidate {
                    candidate: pick.candidate.clone(),
                    score: scores[best],
                    cone_rank: out.len(),
                });
            }
            Ok(out)
        }
    }
}

/// Demonstrations in prompt order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    pub order: OrderPolicy,
}

impl DemonstrationSet {
    pub fn empty(order: OrderPolicy) -> Self {
        Self {
            ids: Vec::new(),
            texts: Vec::new(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Demonstrations joined by `separator`, without a trailing separator.
    pub fn context(&self, separator: &str) -> String {
        self.texts.join(separator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub method: Method,
    /// Candidate pool size K.
    pub candidates: usize,
    /// Shot count N.
    pub shots: usize,
    pub mode: ConeMode,
    pub order: OrderPolicy,
}

impl SelectionParams {
    pub fn new(method: Method, candidates: usize, shots: usize) -> Self {
        Self {
            method,
            candidates,
            shots,
            mode: ConeMode::PerCandidate,
            order: OrderPolicy::BestLast,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<F> {
    pub demos: DemonstrationSet,
    /// Retrieved candidates in retrieval order.
    pub candidates: Vec<Candidate<F>>,
    /// Reranking result; empty for methods that do not rerank.
    pub ranked: Vec<RankedCandidate<F>>,
    /// True when fewer than the requested shots were available.
    pub clipped: bool,
}

/// The text whose entropy is minimized: the rendering of `example` up to the
/// label or target slot.
pub fn test_input(template: &Template, example: &Example) -> Result<String> {
    Ok(template.render(example, Slot::Open)?)
}

/// Orders the first `shots` of a best-first list according to `order`.
fn arrange<F: Scalar>(best_first: Vec<DemoCandidate<F>>, order: OrderPolicy) -> Vec<DemoCandidate<F>> {
    let mut v = best_first;
    match order {
        OrderPolicy::BestFirst => {}
        OrderPolicy::BestLast => v.reverse(),
        OrderPolicy::Retrieval => v.sort_by(|a, b| {
            a.candidate
                .rank
                .cmp(&b.candidate.rank)
                .then_with(|| a.candidate.id.cmp(&b.candidate.id))
        }),
    }
    v
}

/// Picks the demonstrations for `test` from already retrieved candidates.
pub fn select_from_candidates<F: Scalar, S: Scorer<F> + ?Sized>(
    scorer: &S,
    candidates: Vec<DemoCandidate<F>>,
    x: &str,
    separator: &str,
    params: &SelectionParams,
) -> Result<Selection<F>> {
    let n = params.shots;
    let retrieved: Vec<Candidate<F>> = candidates.iter().map(|c| c.candidate.clone()).collect();
    let clipped = candidates.len() < n;
    if n == 0 || candidates.is_empty() {
        return Ok(Selection {
            demos: DemonstrationSet::empty(params.order),
            candidates: retrieved,
            ranked: Vec::new(),
            clipped,
        });
    }
    let (best_first, ranked) = if params.method.reranks() {
        let ranked = rank_candidates(scorer, &candidates, x, separator, params.mode, n)?;
        let by_id: BTreeMap<&str, &DemoCandidate<F>> = candidates
            .iter()
            .map(|c| (c.candidate.id.as_str(), c))
            .collect();
        let best: Vec<DemoCandidate<F>> = ranked
            .iter()
            .take(n)
            .map(|r| (*by_id[r.candidate.id.as_str()]).clone())
            .collect();
        (best, ranked)
    } else {
        (candidates.into_iter().take(n).collect(), Vec::new())
    };
    let arranged = arrange(best_first, params.order);
    Ok(Selection {
        demos: DemonstrationSet {
            ids: arranged.iter().map(|c| c.candidate.id.clone()).collect(),
            texts: arranged.into_iter().map(|c| c.text).collect(),
            order: params.order,
        },
        candidates: retrieved,
        ranked,
        clipped,
    })
}

/// Retrieves, reranks and orders demonstrations for `test` from `pool`.
///
/// Demonstrations are rendered with their gold labels. Methods that rerank
/// retrieve `candidates` examples; the others retrieve `shots` directly.
pub fn select_demonstrations<F: Scalar, S: Scorer<F> + ?Sized>(
    pool: &Dataset,
    test: &Example,
    template: &Template,
    retriever: Option<&Retriever<F>>,
    scorer: &S,
    params: &SelectionParams,
) -> Result<Selection<F>> {
    if params.method == Method::Prompting || params.shots == 0 {
        return Ok(Selection {
            demos: DemonstrationSet::empty(params.order),
            candidates: Vec::new(),
            ranked: Vec::new(),
            clipped: false,
        });
    }
    if params.candidates < params.shots {
        return Err(Error::Config(format!(
            "candidates K = {} is below shots N = {}",
            params.candidates, params.shots
        )));
    }
    let retriever = retriever.ok_or_else(|| {
        Error::Config(format!("method {} needs a retriever", params.method))
    })?;
    let k = if params.method.reranks() {
        params.candidates
    } else {
        params.shots
    };
    let retrieved = retriever.retrieve(&test.id, &template.input_text(test), k)?;
    let candidates = retrieved
        .into_iter()
        .map(|c| {
            let example = pool
                .get(&c.id)
                .ok_or_else(|| Error::UnknownExample(c.id.clone()))?;
            Ok(DemoCandidate {
                text: template.render(example, Slot::Gold)?,
                candidate: c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x = test_input(template, test)?;
    let selection = select_from_candidates(scorer, candidates, &x, template.separator(), params)?;
    if selection.clipped {
        log::warn!(
            "only {} demonstrations available for {} (asked for {})",
            selection.demos.len(),
            test.id,
            params.shots
        );
    }
    Ok(selection)
}

/// One test input and the demonstrations a method chose for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntropyItem {
    pub id: String,
    /// Demonstrations in prompt order.
    pub demos: Vec<String>,
    pub x: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntropy {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Mean of per-token conditional entropies.
    pub mean_per_token: f64,
    /// Conditional entropy per test example, in input order.
    pub per_example: Vec<f64>,
}

/// Mean and spread of `H(x | c)` per method.
pub fn method_entropy_report<F: Scalar, S: Scorer<F> + ?Sized>(
    scorer: &S,
    methods: &BTreeMap<String, Vec<EntropyItem>>,
    separator: &str,
) -> Result<BTreeMap<String, MethodEntropy>> {
    let mut out = BTreeMap::new();
    for (name, items) in methods {
        let scores: Vec<ConeScore<F>> = items
            .par_iter()
            .map(|it| conditional_entropy(scorer, &it.demos.join(separator), &it.x, separator))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = scores.iter().map(|s| s.conditional.as_f64()).collect();
        let per_token: Vec<f64> = scores.iter().map(|s| s.per_token().as_f64()).collect();
        let (mean, var) = mean_variance(&values);
        out.insert(
            name.clone(),
            MethodEntropy {
                count: values.len(),
                mean,
                std: var.sqrt(),
                mean_per_token: mean_variance(&per_token).0,
                per_example: values,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{ngram_train, NgramConfig, NgramModel, SequenceScore, UniformScorer};
    use proptest::prelude::*;

    fn cand(id: &str, rank: usize, text: &str) -> DemoCandidate<f64> {
        DemoCandidate {
            candidate: Candidate {
                id: id.into(),
                score: 1.0 / (rank as f64 + 1.0),
                rank,
            },
            text: text.into(),
        }
    }

    fn bigram() -> NgramModel {
        ngram_train(
            &[
                "the cat sat on the mat",
                "a dog ran in the park",
                "stocks fell as markets slid",
                "the cat ran",
            ],
            NgramConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_context_free() {
        let u = UniformScorer::new(7);
        for c in ["", "a b", "x y z w"] {
            let s: ConeScore<f64> = conditional_entropy(&u, c, "p q r", "\n").unwrap();
            assert!((s.conditional - 3.0 * 7f64.ln()).abs() < 1e-12);
            assert_eq!(s.tokens, 3);
        }
    }

    #[test]
    fn empty_context_identity() {
        let m = bigram();
        let s: ConeScore<f64> = conditional_entropy(&m, "", "the cat sat", "\n").unwrap();
        let direct: SequenceScore<f64> = m.score_sequence("the cat sat").unwrap();
        assert_eq!(s.conditional, direct.total);
        assert_eq!(s.context, 0.0);
    }

    #[test]
    fn shared_bigram_at_seam_lowers_entropy() {
        // Training "a b c d e f": V = 7, each seen context has count 1.
        let m = ngram_train(&["a b c d e f"], NgramConfig::default()).unwrap();
        let x = "f a b c d";
        let seen: f64 = 1.1 / 1.7; // (1 + k) / (1 + k V)
        let unseen_ctx: f64 = 1.0 / 7.0; // k / (k V)
        let shared: ConeScore<f64> = conditional_entropy(&m, "a b c d e", x, "\n").unwrap();
        let disjoint: ConeScore<f64> = conditional_entropy(&m, "u v w y z", x, "\n").unwrap();
        // f|e seen, a|f unseen context, then three seen bigrams.
        let want_shared = -seen.ln() - unseen_ctx.ln() - 3.0 * seen.ln();
        // f|<unk> unseen context, a|f unseen context, then three seen bigrams.
        let want_disjoint = -2.0 * unseen_ctx.ln() - 3.0 * seen.ln();
        assert!((shared.conditional - want_shared).abs() < 1e-12);
        assert!((disjoint.conditional - want_disjoint).abs() < 1e-12);
        assert!(shared.conditional < disjoint.conditional);
    }

    #[test]
    fn cache_rewards_repeated_bigrams() {
        let m = ngram_train(
            &["u v w", "p q r", "v w u"],
            NgramConfig { cache_weight: 0.5, ..Default::default() },
        )
        .unwrap();
        assert_eq!(m.vocab_size(), 7);
        let x = "alpha beta gamma delta epsilon";
        let unseen_ctx: f64 = 1.0 / 7.0;
        // alpha follows q: c(q) = 1, c(q, <unk>) = 0.
        let after_q: f64 = 0.1 / 1.7;
        let disjoint: ConeScore<f64> = conditional_entropy(&m, "u v w p q", x, " ").unwrap();
        let want_disjoint = -after_q.ln() - 4.0 * unseen_ctx.ln();
        assert!((disjoint.conditional - want_disjoint).abs() < 1e-12);
        // Same words as context: the first bigram of x (epsilon alpha) is new,
        // the next four each repeat once in the cache.
        let hit = 0.5 * unseen_ctx + 0.5;
        let shared: ConeScore<f64> = conditional_entropy(&m, x, x, " ").unwrap();
        let want_shared = -unseen_ctx.ln() - 4.0 * hit.ln();
        assert!((shared.conditional - want_shared).abs() < 1e-12);
        assert!(shared.conditional < disjoint.conditional);
    }

    #[test]
    fn identical_candidates_keep_retrieval_order() {
        let m = bigram();
        let cands: Vec<_> = (0..5).map(|i| cand(&format!("e{}", 4 - i), i, "the cat sat")).collect();
        let ranked = rank_candidates(&m, &cands, "the cat ran", "\n", ConeMode::PerCandidate, 1).unwrap();
        let ranks: Vec<usize> = ranked.iter().map(|r| r.candidate.rank).collect();
        assert_eq!(ranks, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn unigram_preserves_retrieval_order() {
        let m = ngram_train(&["a b c d"], NgramConfig { order: 1, ..Default::default() }).unwrap();
        let cands = vec![cand("z", 0, "d d d"), cand("y", 1, "a b"), cand("x", 2, "c")];
        let ranked = rank_candidates(&m, &cands, "a b c", "\n", ConeMode::PerCandidate, 1).unwrap();
        let ids: Vec<&str> = ranked.iter().map(|r| r.candidate.id.as_str()).collect();
        assert_eq!(ids, ["z", "y", "x"]);
        assert!(ranked.windows(2).all(|w| w[0].score.conditional == w[1].score.conditional));
    }

    #[test]
    fn matches_brute_force_rescoring() {
        let m = bigram();
        let texts = ["the cat sat", "stocks fell", "a dog ran in the park", "the mat", "markets slid"];
        let cands: Vec<_> = texts.iter().enumerate().map(|(i, t)| cand(&format!("c{i}"), i, t)).collect();
        let x = "the cat ran in the park";
        let ranked = rank_candidates(&m, &cands, x, "\n", ConeMode::PerCandidate, 1).unwrap();
        let mut oracle: Vec<(f64, usize)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                // Chain rule over the words of x given everything before them.
                let words: Vec<&str> = t.split_whitespace().chain(x.split_whitespace()).collect();
                let start = t.split_whitespace().count();
                let h: f64 = (start..words.len())
                    .map(|j| -m.probability(&words[..j], words[j]).unwrap().ln())
                    .fold(0.0, |a, b| a + b);
                (h, i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<usize> = ranked.iter().map(|r| r.candidate.rank).collect();
        let want: Vec<usize> = oracle.iter().map(|o| o.1).collect();
        assert_eq!(got, want);
        for r in &ranked {
            assert!((r.score.conditional - (r.score.joint - r.score.context)).abs() <= 1e-9);
        }
    }

    #[test]
    fn greedy_group_builds_context() {
        let m = bigram();
        let cands = vec![
            cand("a", 0, "stocks fell"),
            cand("b", 1, "the cat sat"),
            cand("c", 2, "a dog ran in the park"),
        ];
        let x = "the cat ran in the park";
        let ranked = rank_candidates(&m, &cands, x, "\n", ConeMode::GreedyGroup, 2).unwrap();
        assert_eq!(ranked.len(), 2);
        let first = &ranked[0];
        let solo = rank_candidates(&m, &cands, x, "\n", ConeMode::PerCandidate, 0).unwrap();
        assert_eq!(first.candidate.id, solo[0].candidate.id);
        // Second step: oracle over the remaining two, new one farthest from x.
        let first_text = cands.iter().find(|c| c.candidate.id == first.candidate.id).unwrap();
        let best_second = cands
            .iter()
            .filter(|c| c.candidate.id != first.candidate.id)
            .map(|c| {
                let ctx = format!("{}\n{}", c.text, first_text.text);
                let s: ConeScore<f64> = conditional_entropy(&m, &ctx, x, "\n").unwrap();
                (s.conditional, c.candidate.rank, c.candidate.id.clone())
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .unwrap();
        assert_eq!(ranked[1].candidate.id, best_second.2);
        assert_eq!(ranked[1].score.conditional, best_second.0);
    }

    #[test]
    fn empty_candidates_error() {
        let m = bigram();
        assert!(matches!(
            rank_candidates::<f64, _>(&m, &[], "x", "\n", ConeMode::PerCandidate, 1),
            Err(Error::NoCandidates)
        ));
    }

    #[test]
    fn order_policies() {
        let m = UniformScorer::new(5);
        let cands = vec![cand("a", 0, "p"), cand("b", 1, "q"), cand("c", 2, "r")];
        let mut params = SelectionParams::new(Method::TopKCone, 3, 3);
        let s = select_from_candidates(&m, cands.clone(), "x", "\n", &params).unwrap();
        assert_eq!(s.demos.ids, ["c", "b", "a"]);
        params.order = OrderPolicy::BestFirst;
        let s = select_from_candidates(&m, cands.clone(), "x", "\n", &params).unwrap();
        assert_eq!(s.demos.ids, ["a", "b", "c"]);
        params.order = OrderPolicy::Retrieval;
        let s = select_from_candidates(&m, cands, "x", "\n", &params).unwrap();
        assert_eq!(s.demos.ids, ["a", "b", "c"]);
    }

    #[test]
    fn uniform_scorer_reduces_to_topk() {
        let u = UniformScorer::new(9);
        let cands: Vec<_> = (0..6).map(|i| cand(&format!("d{i}"), i, &"w ".repeat(i + 1))).collect();
        let cone = select_from_candidates(&u, cands.clone(), "x y", "\n", &SelectionParams::new(Method::TopKCone, 6, 3)).unwrap();
        let plain = select_from_candidates(&u, cands, "x y", "\n", &SelectionParams::new(Method::TopK, 6, 3)).unwrap();
        assert_eq!(cone.demos, plain.demos);
    }

    #[test]
    fn clipping_and_zero_shots() {
        let u = UniformScorer::new(3);
        let s = select_from_candidates(&u, vec![cand("a", 0, "p")], "x", "\n", &SelectionParams::new(Method::TopKCone, 4, 4)).unwrap();
        assert!(s.clipped);
        assert_eq!(s.demos.ids, ["a"]);
        let z = select_from_candidates(&u, vec![cand("a", 0, "p")], "x", "\n", &SelectionParams::new(Method::TopKCone, 4, 0)).unwrap();
        assert!(z.demos.is_empty() && !z.clipped);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert_eq!("greedy-group".parse::<ConeMode>().unwrap(), ConeMode::GreedyGroup);
        assert_eq!("retrieval".parse::<OrderPolicy>().unwrap(), OrderPolicy::Retrieval);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn entropy_report_single_example() {
        let m = bigram();
        let mut methods = BTreeMap::new();
        methods.insert(
            "topk".to_string(),
            vec![EntropyItem { id: "0".into(), demos: vec!["the cat sat".into()], x: "the mat".into() }],
        );
        let r = method_entropy_report::<f64, _>(&m, &methods, "\n").unwrap();
        let s: ConeScore<f64> = conditional_entropy(&m, "the cat sat", "the mat", "\n").unwrap();
        assert_eq!(r["topk"].mean, s.conditional);
        assert_eq!(r["topk"].std, 0.0);
        assert_eq!(r.len(), 1);
    }

    fn ranked_from(values: &[(f64, usize)]) -> Vec<RankedCandidate<f64>> {
        values
            .iter()
            .enumerate()
            .map(|(i, &(h, rank))| RankedCandidate {
                candidate: Candidate { id: format!("id{i}"), score: 0.0, rank },
                score: ConeScore { joint: h, context: 0.0, conditional: h, tokens: 1 },
                cone_rank: 0,
            })
            .collect()
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_order(values in proptest::collection::vec((0u8..6, 0usize..4), 1..12)) {
            let base: Vec<(f64, usize)> = values.iter().map(|&(h, r)| (h as f64, r)).collect();
            let mut a = ranked_from(&base);
            let mut b = ranked_from(&base.iter().map(|&(h, r)| ((h * 0.3).exp() * 2.0 - 1.0, r)).collect::<Vec<_>>());
            sort_ranked(&mut a);
            sort_ranked(&mut b);
            let ids = |v: &[RankedCandidate<f64>]| v.iter().map(|r| r.candidate.id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }

        #[test]
        fn pool_order_invariant(perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
                                mode in prop_oneof![Just(ConeMode::PerCandidate), Just(ConeMode::GreedyGroup)]) {
            let m = bigram();
            let texts = ["the cat sat", "stocks fell", "the cat sat", "a dog ran", "the park", "markets slid"];
            let cands: Vec<_> = texts.iter().enumerate().map(|(i, t)| cand(&format!("c{i}"), i, t)).collect();
            let shuffled: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
            let params = SelectionParams { mode, ..SelectionParams::new(Method::TopKCone, 6, 3) };
            let a = select_from_candidates(&m, cands, "the cat ran", "\n", &params).unwrap();
            let b = select_from_candidates(&m, shuffled, "the cat ran", "\n", &params).unwrap();
            prop_assert_eq!(a.demos, b.demos);
        }
    }
}
