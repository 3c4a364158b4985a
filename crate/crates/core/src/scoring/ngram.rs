use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{
    word_spans, BackendKind, ContinuationScore, Result, ScoreError, Scorer, SequenceScore,
    TokenScore,
};
use crate::num::Scalar;

/// Padding symbol placed before every sequence; never predicted.
pub const START_SYMBOL: &str = "<s>";
const UNK: u32 = 0;
const START: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct NgramConfig {
    pub order: usize,
    /// Additive smoothing constant.
    pub k: f64,
    /// Words seen fewer times than this map to the unknown symbol.
    pub min_count: usize,
    /// Lower bound on probabilities. Without one, a zero probability under
    /// `k = 0` is an error.
    pub floor: Option<f64>,
    /// Weight of the in-context cache. At 0 the model is the plain smoothed
    /// n-gram; above 0 each probability is mixed with the relative frequency
    /// of the same (context, word) pair earlier in the scored text.
    pub cache_weight: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self {
            order: 2,
            k: 0.1,
            min_count: 1,
            floor: None,
            cache_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Word-level n-gram model with add-k smoothing:
/// `P(w | h) = (c(h, w) + k) / (c(h) + k·V)` where `V` counts the training
/// vocabulary plus the unknown-word symbol and `c(h)` counts occurrences of
/// `h` as a context. Each text is padded with `order - 1` start symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    config: NgramConfig,
    vocab: HashMap<String, u32>,
    counts: HashMap<Vec<u32>, ContextCounts>,
    model_id: String,
}

/// Trains on `texts`, each a separate whitespace-tokenized sequence.
pub fn ngram_train<S: AsRef<str>>(texts: &[S], config: NgramConfig) -> Result<NgramModel> {
    if config.order == 0 {
        return Err(ScoreError::InvalidConfig("order must be at least 1".into()));
    }
    if !(config.k >= 0.0 && config.k.is_finite()) {
        return Err(ScoreError::InvalidConfig(format!("smoothing k = {}", config.k)));
    }
    if !(0.0..=1.0).contains(&config.cache_weight) {
        return Err(ScoreError::InvalidConfig(format!(
            "cache weight {} outside [0, 1]",
            config.cache_weight
        )));
    }
    if let Some(f) = config.floor {
        if !(f > 0.0 && f <= 1.0) {
            return Err(ScoreError::InvalidConfig(format!("floor {f} outside (0, 1]")));
        }
    }
    let sequences: Vec<Vec<&str>> = texts
        .iter()
        .map(|t| t.as_ref().split_whitespace().collect())
        .collect();
    if sequences.iter().all(Vec::is_empty) {
        return Err(ScoreError::EmptyCorpus);
    }

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for w in sequences.iter().flatten() {
        *freq.entry(w).or_default() += 1;
    }
    let mut kept: Vec<&str> = freq
        .iter()
        .filter(|(_, &c)| c >= config.min_count.max(1))
        .map(|(w, _)| *w)
        .collect();
    kept.sort_unstable();
    let vocab: HashMap<String, u32> = kept
        .iter()
        .enumerate()
        .map(|(i, w)| (w.to_string(), i as u32 + 1))
        .collect();

    let mut counts: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
    let history = config.order - 1;
    for seq in &sequences {
        let mut ids = vec![START; history];
        ids.extend(seq.iter().map(|w| vocab.get(*w).copied().unwrap_or(UNK)));
        for i in history..ids.len() {
            let entry = counts.entry(ids[i - history..i].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(ids[i]).or_default() += 1;
        }
    }

    let mut h = Sha256::new();
    for t in texts {
        h.update(t.as_ref().as_bytes());
        h.update([0u8]);
    }
    let digest = hex::encode(&h.finalize()[..6]);
    let mut model_id = format!("ngram-n{}-k{}", config.order, config.k);
    if config.cache_weight > 0.0 {
        model_id.push_str(&format!("-cache{}", config.cache_weight));
    }
    model_id.push('-');
    model_id.push_str(&digest);

    Ok(NgramModel {
        config,
        vocab,
        counts,
        model_id,
    })
}

/// Cache of (context, word) counts observed so far in one scored text.
#[derive(Default)]
struct InContextCounts {
    counts: HashMap<Vec<u32>, ContextCounts>,
}

impl NgramModel {
    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    /// Vocabulary size including the unknown-word symbol.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Maps words to ids. Out-of-vocabulary words get fresh ids above the
    /// vocabulary so the in-context cache can still tell them apart; the
    /// smoothed model sees all of them as unknown.
    fn ids(&self, words: &[&str]) -> Vec<u32> {
        let mut fresh: HashMap<&str, u32> = HashMap::new();
        let base = self.vocab.len() as u32 + 1;
        words
            .iter()
            .map(|w| match self.vocab.get(*w) {
                Some(&id) => id,
                None => {
                    let next = base + fresh.len() as u32;
                    *fresh.entry(w).or_insert(next)
                }
            })
            .collect()
    }

    fn model_id_of(&self, id: u32) -> u32 {
        if id == START || id <= self.vocab.len() as u32 {
            id
        } else {
            UNK
        }
    }

    fn smoothed(&self, context: &[u32], word: u32) -> Option<f64> {
        let ctx: Vec<u32> = context.iter().map(|&c| self.model_id_of(c)).collect();
        let (c_hw, c_h) = match self.counts.get(&ctx) {
            Some(cc) => (
                cc.next.get(&self.model_id_of(word)).copied().unwrap_or(0),
                cc.total,
            ),
            None => (0, 0),
        };
        let k = self.config.k;
        let denom = c_h as f64 + k * self.vocab_size() as f64;
        if denom == 0.0 {
            return None;
        }
        Some((c_hw as f64 + k) / denom)
    }

    /// Probability of `word` after the `order - 1` words of `context`
    /// (shorter contexts are left-padded with start symbols). Ignores the
    /// in-context cache.
    pub fn probability(&self, context: &[&str], word: &str) -> Result<f64> {
        let history = self.config.order - 1;
        let mut words: Vec<&str> = context.to_vec();
        words.push(word);
        let ids = self.ids(&words);
        let mut ctx = vec![START; history.saturating_sub(context.len())];
        ctx.extend(&ids[context.len().saturating_sub(history)..context.len()]);
        let p = self.smoothed(&ctx, ids[context.len()]);
        self.apply_floor(p, &ctx, word)
    }

    fn apply_floor(&self, p: Option<f64>, ctx: &[u32], word: &str) -> Result<f64> {
        match (p, self.config.floor) {
            (Some(p), Some(f)) => Ok(p.max(f)),
            (None, Some(f)) => Ok(f),
            (Some(p), None) if p > 0.0 => Ok(p),
            (Some(_), None) => Err(ScoreError::ZeroProbability(word.to_string())),
            (None, None) => Err(ScoreError::UnseenContext(format!("{ctx:?}"))),
        }
    }

    /// nll of every word at position `from` onward, in order.
    fn word_nlls<F: Scalar>(&self, words: &[&str], from: usize) -> Result<Vec<F>> {
        let history = self.config.order - 1;
        let mut ids = vec![START; history];
        ids.extend(self.ids(words));
        let lambda = self.config.cache_weight;
        let mut cache = InContextCounts::default();
        let mut out = Vec::with_capacity(words.len().saturating_sub(from));
        for pos in 0..words.len() {
            let i = pos + history;
            let ctx = &ids[i - history..i];
            let word = ids[i];
            if pos >= from {
                let base = self.smoothed(ctx, word);
                let mixed = match (lambda > 0.0, cache.counts.get(ctx)) {
                    (true, Some(cc)) if cc.total > 0 => {
                        let hit = cc.next.get(&word).copied().unwrap_or(0) as f64;
                        base.map(|b| (1.0 - lambda) * b + lambda * hit / cc.total as f64)
                    }
                    _ => base,
                };
                let p = self.apply_floor(mixed, ctx, words[pos])?;
                out.push(-F::of(p).ln());
            }
            if lambda > 0.0 {
                let entry = cache.counts.entry(ctx.to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(word).or_default() += 1;
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> Scorer<F> for NgramModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::ReferenceNgram
    }

    fn score_sequence(&self, text: &str) -> Result<SequenceScore<F>> {
        let spans = word_spans(text);
        let words: Vec<&str> = spans.iter().map(|s| s.1).collect();
        let nlls = self.word_nlls::<F>(&words, 0)?;
        Ok(SequenceScore::from_tokens(
            spans
                .into_iter()
                .zip(nlls)
                .map(|((span, w), nll)| TokenScore {
                    text: w.to_string(),
                    span,
                    nll,
                })
                .collect(),
        ))
    }

    /// Scores the continuation words directly, each conditioned on the
    /// prefix words and the continuation words before it.
    fn score_continuation(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore<F>> {
        let mut words: Vec<&str> = prefix.split_whitespace().collect();
        let from = words.len();
        words.extend(continuation.split_whitespace());
        let nlls = self.word_nlls::<F>(&words, from)?;
        Ok(ContinuationScore {
            tokens: nlls.len(),
            nll: nlls.into_iter().fold(F::zero(), |a, b| a + b),
        })
    }
}

/// Assigns every whitespace token probability `1 / vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniformScorer {
    vocab_size: usize,
    model_id: String,
}

impl UniformScorer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            vocab_size,
            model_id: format!("uniform-v{vocab_size}"),
        }
    }
}

impl<F: Scalar> Scorer<F> for UniformScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Uniform
    }

    fn score_sequence(&self, text: &str) -> Result<SequenceScore<F>> {
        let nll = F::of_count(self.vocab_size as u64).ln();
        Ok(SequenceScore::from_tokens(
            word_spans(text)
                .into_iter()
                .map(|(span, w)| TokenScore {
                    text: w.to_string(),
                    span,
                    nll,
                })
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unigram_aab() -> NgramModel {
        ngram_train(
            &["a a b"],
            NgramConfig {
                order: 1,
                k: 0.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    /// Counting oracle for the add-k formula on a small corpus.
    fn oracle_prob(corpus: &[&str], order: usize, k: f64, ctx: &[&str], w: &str) -> f64 {
        let mut vocab: Vec<&str> = corpus.iter().flat_map(|t| t.split_whitespace()).collect();
        vocab.sort();
        vocab.dedup();
        let v = vocab.len() as f64 + 1.0;
        let known = |x: &str| if vocab.contains(&x) { x.to_string() } else { "<unk>".into() };
        let (mut c_hw, mut c_h) = (0.0, 0.0);
        let want_ctx: Vec<String> = {
            let mut c: Vec<String> = vec!["<s>".into(); (order - 1).saturating_sub(ctx.len())];
            c.extend(ctx[ctx.len().saturating_sub(order - 1)..].iter().map(|x| known(x)));
            c
        };
        for t in corpus {
            let mut toks: Vec<String> = vec!["<s>".into(); order - 1];
            toks.extend(t.split_whitespace().map(|x| x.to_string()));
            for i in order - 1..toks.len() {
                if toks[i - (order - 1)..i] == want_ctx[..] {
                    c_h += 1.0;
                    if toks[i] == known(w) {
                        c_hw += 1.0;
                    }
                }
            }
        }
        (c_hw + k) / (c_h + k * v)
    }

    #[test]
    fn unigram_probabilities_from_counts() {
        let m = unigram_aab();
        assert!((m.probability(&[], "a").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.probability(&[], "b").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.vocab_size(), 3);
    }

    #[test]
    fn scores_a_b() {
        let s: SequenceScore<f64> = unigram_aab().score_sequence("a b").unwrap();
        assert!((s.total - 1.5041).abs() < 1e-4);
        assert!((s.total - (-(2f64 / 3.0).ln() - (1f64 / 3.0).ln())).abs() < 1e-12);
        let empty: SequenceScore<f64> = unigram_aab().score_sequence("").unwrap();
        assert_eq!(empty.total, 0.0);
        assert!(empty.tokens.is_empty());
    }

    #[test]
    fn bigram_matches_oracle() {
        let corpus = ["the cat sat", "the dog sat down", "a cat ran"];
        let m = ngram_train(&corpus, NgramConfig { order: 2, k: 0.1, ..Default::default() }).unwrap();
        for (ctx, w) in [
            (&["the"][..], "cat"),
            (&[][..], "the"),
            (&["cat"][..], "sat"),
            (&["zebra"][..], "sat"),
            (&["sat"][..], "down"),
            (&["the"][..], "unicorn"),
        ] {
            let got = m.probability(ctx, w).unwrap();
            let want = oracle_prob(&corpus, 2, 0.1, ctx, w);
            assert!((got - want).abs() < 1e-15, "{ctx:?} {w}: {got} vs {want}");
        }
        let tri = ngram_train(&corpus, NgramConfig { order: 3, k: 0.5, ..Default::default() }).unwrap();
        let got = tri.probability(&["the", "cat"], "sat").unwrap();
        assert!((got - oracle_prob(&corpus, 3, 0.5, &["the", "cat"], "sat")).abs() < 1e-15);
    }

    #[test]
    fn large_k_approaches_uniform() {
        let m = ngram_train(&["a a b c"], NgramConfig { order: 2, k: 1e12, ..Default::default() }).unwrap();
        let v = m.vocab_size() as f64;
        let s: SequenceScore<f64> = m.score_sequence("a b c").unwrap();
        assert!((s.total - 3.0 * v.ln()).abs() < 1e-6);
    }

    #[test]
    fn uniform_scorer() {
        let u = UniformScorer::new(4);
        let s: SequenceScore<f64> = u.score_sequence("x y z").unwrap();
        assert!((s.total - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn retraining_is_deterministic() {
        let cfg = NgramConfig::default();
        let a = ngram_train(&["x y z", "y z"], cfg.clone()).unwrap();
        let b = ngram_train(&["x y z", "y z"], cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(Scorer::<f64>::model_id(&a), Scorer::<f64>::model_id(&b));
    }

    #[test]
    fn zero_smoothing_errors_and_floor() {
        let cfg = NgramConfig { order: 2, k: 0.0, ..Default::default() };
        let m = ngram_train(&["a b"], cfg.clone()).unwrap();
        assert!(matches!(
            Scorer::<f64>::score_sequence(&m, "a b a"),
            Err(ScoreError::UnseenContext(_))
        ));
        assert!(matches!(
            Scorer::<f64>::score_sequence(&m, "a a"),
            Err(ScoreError::ZeroProbability(_))
        ));
        let floored = ngram_train(&["a b"], NgramConfig { floor: Some(1e-6), ..cfg }).unwrap();
        let s: SequenceScore<f64> = floored.score_sequence("a b a").unwrap();
        assert!(s.total.is_finite() && s.total > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(matches!(ngram_train::<&str>(&[], NgramConfig::default()), Err(ScoreError::EmptyCorpus)));
        assert!(matches!(ngram_train(&["  "], NgramConfig::default()), Err(ScoreError::EmptyCorpus)));
        assert!(ngram_train(&["a"], NgramConfig { order: 0, ..Default::default() }).is_err());
        assert!(ngram_train(&["a"], NgramConfig { k: -1.0, ..Default::default() }).is_err());
        assert!(ngram_train(&["a"], NgramConfig { cache_weight: 2.0, ..Default::default() }).is_err());
    }

    #[test]
    fn unigram_continuation_ignores_prefix() {
        let m = ngram_train(&["a b c a"], NgramConfig { order: 1, ..Default::default() }).unwrap();
        let x: ContinuationScore<f64> = m.score_continuation("", "a c").unwrap();
        for prefix in ["b ", "a a a\n", "zzz "] {
            let y: ContinuationScore<f64> = m.score_continuation(prefix, "a c").unwrap();
            assert_eq!(x.nll, y.nll);
        }
    }

    #[test]
    fn cache_lowers_repeated_bigrams() {
        let corpus = ["a b c d", "c d a b"];
        let plain = ngram_train(&corpus, NgramConfig::default()).unwrap();
        let cached = ngram_train(&corpus, NgramConfig { cache_weight: 0.5, ..Default::default() }).unwrap();
        let p: ContinuationScore<f64> = plain.score_continuation("x y\n", "x y").unwrap();
        let c: ContinuationScore<f64> = cached.score_continuation("x y\n", "x y").unwrap();
        assert!(c.nll < p.nll);
        // first occurrence gets no cache help
        let p0: SequenceScore<f64> = plain.score_sequence("x y").unwrap();
        let c0: SequenceScore<f64> = cached.score_sequence("x y").unwrap();
        assert_eq!(p0.total, c0.total);
    }

    proptest! {
        #[test]
        fn chain_rule_at_every_split(words in proptest::collection::vec("[a-e]", 1..12),
                                     split in 0usize..12, order in 1usize..4,
                                     cache in prop_oneof![Just(0.0), Just(0.4)]) {
            let corpus = ["a b c d e a b", "c c d a", "e d c b a"];
            let m = ngram_train(&corpus, NgramConfig { order, k: 0.1, cache_weight: cache, ..Default::default() }).unwrap();
            let split = split.min(words.len());
            let prefix = words[..split].iter().map(|w| format!("{w} ")).collect::<String>();
            let cont = words[split..].join(" ");
            let whole: SequenceScore<f64> = m.score_sequence(&format!("{prefix}{cont}")).unwrap();
            let head: SequenceScore<f64> = m.score_sequence(&prefix).unwrap();
            let c: ContinuationScore<f64> = m.score_continuation(&prefix, &cont).unwrap();
            prop_assert!((whole.total - head.total - c.nll).abs() <= 1e-9);
            prop_assert!(whole.tokens.iter().all(|t| t.nll.is_finite() && t.nll >= 0.0));
            let sum: f64 = whole.tokens.iter().map(|t| t.nll).sum();
            prop_assert!((sum - whole.total).abs() <= 1e-9);
        }
    }
}
