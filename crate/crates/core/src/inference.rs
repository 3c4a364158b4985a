//! Label-scoring classification, hypothesis emission and accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cone::{DemonstrationSet, Method};
use crate::corpus::{Example, Slot, TaskKind, Template};
use crate::num::Scalar;
use crate::scoring::Scorer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Predicted label for classification.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    /// Generated text for generation tasks.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hypothesis: Option<String>,
    /// nll of the query rendered with each label, given the demonstrations.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub nll: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gold: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain: Option<String>,
    /// Demonstration ids in prompt order.
    pub demonstrations: Vec<String>,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        self.label.is_some() && self.label == self.gold
    }
}

/// Prefix the query is scored after: the demonstrations plus a separator,
/// or nothing for zero-shot prompts.
pub fn demo_prefix(demos: &DemonstrationSet, separator: &str) -> String {
    if demos.is_empty() {
        String::new()
    } else {
        format!("{}{separator}", demos.context(separator))
    }
}

/// Lowest value wins; ties go to the label that sorts first.
fn argmin(nll: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, &v) in nll {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((label, v));
        }
    }
    best.map(|(l, _)| l)
}

/// Scores the full query rendered with every label as a continuation of the
/// demonstrations and predicts the label with the lowest nll. With
/// `normalize`, nll is divided by the number of query tokens.
pub fn classify<F: Scalar, S: Scorer<F> + ?Sized>(
    scorer: &S,
    demos: &DemonstrationSet,
    test: &Example,
    template: &Template,
    normalize: bool,
) -> Result<Prediction> {
    if template.kind() != TaskKind::Classification {
        return Err(Error::WrongTaskKind("classification"));
    }
    let prefix = demo_prefix(demos, template.separator());
    let mut nll = BTreeMap::new();
    for label in template.labels() {
        let query = template.render(test, Slot::Label(label))?;
        let score = scorer.score_continuation(&prefix, &query)?;
        let v = if normalize { score.mean() } else { score.nll };
        nll.insert(label.to_string(), v.as_f64());
    }
    Ok(Prediction {
        id: test.id.clone(),
        label: argmin(&nll).map(str::to_string),
        hypothesis: None,
        nll,
        gold: test.label.clone(),
        domain: test.domain.clone(),
        demonstrations: demos.ids.clone(),
    })
}

/// Longest prompt `classify` would send for `test` with `demos`, in chars.
pub fn prompt_chars(demos: &DemonstrationSet, test: &Example, template: &Template) -> Result<usize> {
    let prefix = demo_prefix(demos, template.separator()).chars().count();
    let query = match template.kind() {
        TaskKind::Classification => template
            .labels()
            .into_iter()
            .map(|l| template.render(test, Slot::Label(l)).map(|q| q.chars().count()))
            .collect::<std::result::Result<Vec<_>, _>>()?
            .into_iter()
            .max()
            .unwrap_or(0),
        TaskKind::Generation => template.render(test, Slot::Open)?.chars().count(),
    };
    Ok(prefix + query)
}

/// Drops demonstrations from the front of the prompt (farthest from the test
/// input) until it fits in `max_chars`. Returns how many were dropped.
pub fn fit_demonstrations(
    demos: &mut DemonstrationSet,
    test: &Example,
    template: &Template,
    max_chars: Option<usize>,
) -> Result<usize> {
    let Some(max) = max_chars else { return Ok(0) };
    let mut dropped = 0;
    while !demos.is_empty() && prompt_chars(demos, test, template)? > max {
        drop_farthest(demos);
        dropped += 1;
    }
    Ok(dropped)
}

/// Removes the demonstration farthest from the test input.
pub fn drop_farthest(demos: &mut DemonstrationSet) {
    if !demos.is_empty() {
        demos.ids.remove(0);
        demos.texts.remove(0);
    }
}

/// Fraction of predictions whose label matches `golds`. The prediction ids
/// must be exactly the gold ids.
pub fn accuracy(predictions: &[Prediction], golds: &BTreeMap<String, String>) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Accuracy("no predictions".into()));
    }
    let ids: BTreeSet<&str> = predictions.iter().map(|p| p.id.as_str()).collect();
    if ids.len() != predictions.len() {
        return Err(Error::Accuracy("duplicate prediction ids".into()));
    }
    if !ids.iter().copied().eq(golds.keys().map(String::as_str)) {
        return Err(Error::Accuracy("prediction ids do not match gold ids".into()));
    }
    let correct = predictions
        .iter()
        .filter(|p| p.label.as_deref() == Some(golds[&p.id].as_str()))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Completes the target slot of a generation template after the
/// demonstrations. The completion is cut at `stop`, trimmed, and newlines
/// are flattened to spaces so it fits on one line.
pub fn generate_hypothesis<F: Scalar, S: Scorer<F> + ?Sized>(
    scorer: &S,
    demos: &DemonstrationSet,
    test: &Example,
    template: &Template,
    max_tokens: usize,
    stop: &str,
) -> Result<Prediction> {
    if template.kind() != TaskKind::Generation {
        return Err(Error::WrongTaskKind("generation"));
    }
    let prompt = format!(
        "{}{}",
        demo_prefix(demos, template.separator()),
        template.render(test, Slot::Open)?
    );
    let raw = scorer.generate(&prompt, max_tokens, stop)?;
    let cut = match (stop.is_empty(), raw.find(stop)) {
        (false, Some(i)) => &raw[..i],
        _ => raw.as_str(),
    };
    let hypothesis = cut.trim().replace(['\r', '\n'], " ");
    if hypothesis.is_empty() {
        log::warn!("empty hypothesis for {}", test.id);
    }
    Ok(Prediction {
        id: test.id.clone(),
        label: None,
        hypothesis: Some(hypothesis),
        nll: BTreeMap::new(),
        gold: None,
        domain: test.domain.clone(),
        demonstrations: demos.ids.clone(),
    })
}

/// Writes aligned `source`, `hypothesis` and `reference` files, one line per
/// test example, for external scoring.
pub struct HypothesisWriter {
    dir: PathBuf,
    src: BufWriter<File>,
    hyp: BufWriter<File>,
    reference: BufWriter<File>,
    lines: usize,
    empty: usize,
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

impl HypothesisWriter {
    pub const SOURCE_FILE: &'static str = "source.txt";
    pub const HYPOTHESIS_FILE: &'static str = "hypothesis.txt";
    pub const REFERENCE_FILE: &'static str = "reference.txt";

    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(io(&p))?))
        };
        Ok(Self {
            src: open(Self::SOURCE_FILE)?,
            hyp: open(Self::HYPOTHESIS_FILE)?,
            reference: open(Self::REFERENCE_FILE)?,
            dir,
            lines: 0,
            empty: 0,
        })
    }

    pub fn write(&mut self, source: &str, hypothesis: &str, reference: &str) -> Result<()> {
        let dir = self.dir.clone();
        let io = |source| Error::Io { path: dir.clone(), source };
        writeln!(self.src, "{}", one_line(source)).map_err(io)?;
        writeln!(self.hyp, "{}", one_line(hypothesis)).map_err(io)?;
        writeln!(self.reference, "{}", one_line(reference)).map_err(io)?;
        self.lines += 1;
        if hypothesis.is_empty() {
            self.empty += 1;
        }
        Ok(())
    }

    /// Flushes all files; returns (lines written, empty hypotheses).
    pub fn finish(mut self) -> Result<(usize, usize)> {
        for w in [&mut self.src, &mut self.hyp, &mut self.reference] {
            w.flush().map_err(|source| Error::Io {
                path: self.dir.clone(),
                source,
            })?;
        }
        Ok((self.lines, self.empty))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Results of one method on one test set under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seed: u64,
    pub shots: usize,
    pub candidates: usize,
    pub scorer: String,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`.
    pub accuracy: f64,
    pub per_domain: BTreeMap<String, DomainAccuracy>,
    /// Demonstrations dropped to respect the prompt length limit.
    pub truncated_demonstrations: usize,
    /// Test examples that received fewer demonstrations than requested.
    pub clipped_examples: usize,
    pub predictions: Vec<Prediction>,
    /// Kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl EvalReport {
    /// Builds a report; predictions are sorted by id. Fails on an empty set.
    #[allow(clippy::too_many_arguments)]
    pub fn from_predictions(
        method: Method,
        seed: u64,
        shots: usize,
        candidates: usize,
        scorer: &str,
        mut predictions: Vec<Prediction>,
        truncated_demonstrations: usize,
        clipped_examples: usize,
    ) -> Result<Self> {
        predictions.sort_by(|a, b| a.id.cmp(&b.id));
        let golds: BTreeMap<String, String> = predictions
            .iter()
            .map(|p| (p.id.clone(), p.gold.clone().unwrap_or_default()))
            .collect();
        let accuracy = accuracy(&predictions, &golds)?;
        let mut per_domain: BTreeMap<String, DomainAccuracy> = BTreeMap::new();
        for p in &predictions {
            if let Some(d) = &p.domain {
                let e = per_domain.entry(d.clone()).or_default();
                e.total += 1;
                e.correct += usize::from(p.is_correct());
            }
        }
        for d in per_domain.values_mut() {
            d.accuracy = d.correct as f64 / d.total as f64;
        }
        Ok(Self {
            method,
            seed,
            shots,
            candidates,
            scorer: scorer.to_string(),
            correct: predictions.iter().filter(|p| p.is_correct()).count(),
            total: predictions.len(),
            accuracy,
            per_domain,
            truncated_demonstrations,
            clipped_examples,
            predictions,
            wall_time: Duration::ZERO,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::OrderPolicy;
    use crate::scoring::{ngram_train, NgramConfig, StubMode, StubScript, StubServer, UniformScorer};
    use crate::scoring::{RemoteConfig, RemoteScorer};
    use proptest::prelude::*;

    fn sentiment() -> Template {
        Template::classification([
            ("negative", "Review: <X> Sentiment: negative"),
            ("positive", "Review: <X> Sentiment: positive"),
        ])
        .unwrap()
    }

    fn demos(texts: &[&str]) -> DemonstrationSet {
        DemonstrationSet {
            ids: (0..texts.len()).map(|i| format!("d{i}")).collect(),
            texts: texts.iter().map(|t| t.to_string()).collect(),
            order: OrderPolicy::BestLast,
        }
    }

    fn pred(id: &str, label: &str) -> Prediction {
        Prediction {
            id: id.into(),
            label: Some(label.into()),
            hypothesis: None,
            nll: BTreeMap::new(),
            gold: None,
            domain: None,
            demonstrations: vec![],
        }
    }

    #[test]
    fn uniform_tie_goes_to_first_label() {
        let u = UniformScorer::new(10);
        let ex = Example::new("t").with_field("text", "fine");
        let p = classify::<f64, _>(&u, &demos(&[]), &ex, &sentiment(), false).unwrap();
        assert_eq!(p.label.as_deref(), Some("negative"));
        assert_eq!(p.nll["negative"], p.nll["positive"]);
    }

    #[test]
    fn trained_on_positive_predicts_positive() {
        let m = ngram_train(
            &["Review: great Sentiment: positive", "Review: fine Sentiment: positive"],
            NgramConfig::default(),
        )
        .unwrap();
        let ex = Example::new("t").with_field("text", "okay");
        let p = classify::<f64, _>(&m, &demos(&[]), &ex, &sentiment(), false).unwrap();
        assert_eq!(p.label.as_deref(), Some("positive"));
        // Only the label word differs: positive|Sentiment: seen twice, negative unseen.
        let v = m.vocab_size() as f64;
        let want = ((2.0 + 0.1) / (2.0 + 0.1 * v)).ln() - (0.1 / (2.0 + 0.1 * v)).ln();
        assert!((p.nll["negative"] - p.nll["positive"] - want).abs() < 1e-9);
    }

    #[test]
    fn zero_shot_is_unconditional() {
        let m = ngram_train(&["Review: a Sentiment: negative"], NgramConfig::default()).unwrap();
        let ex = Example::new("t").with_field("text", "a");
        let p = classify::<f64, _>(&m, &demos(&[]), &ex, &sentiment(), false).unwrap();
        for (label, v) in &p.nll {
            let q = sentiment().render(&ex, Slot::Label(label)).unwrap();
            let s: crate::scoring::SequenceScore<f64> = m.score_sequence(&q).unwrap();
            assert_eq!(*v, s.total);
        }
    }

    #[test]
    fn context_free_ignores_demonstrations() {
        let m = ngram_train(&["Review: a b Sentiment: positive negative"], NgramConfig { order: 1, ..Default::default() }).unwrap();
        let ex = Example::new("t").with_field("text", "a");
        let a = classify::<f64, _>(&m, &demos(&[]), &ex, &sentiment(), false).unwrap();
        let b = classify::<f64, _>(&m, &demos(&["Review: b Sentiment: negative"]), &ex, &sentiment(), false).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.nll, b.nll);
    }

    #[test]
    fn accuracy_cases() {
        let golds: BTreeMap<String, String> =
            [("a", "x"), ("b", "y"), ("c", "x"), ("d", "x")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let preds = vec![pred("a", "x"), pred("b", "y"), pred("c", "x"), pred("d", "y")];
        assert_eq!(accuracy(&preds, &golds).unwrap(), 0.75);
        let all = vec![pred("a", "x"), pred("b", "y"), pred("c", "x"), pred("d", "x")];
        assert_eq!(accuracy(&all, &golds).unwrap(), 1.0);
        assert!(accuracy(&[pred("z", "x")], &golds).is_err());
        assert!(accuracy(&[], &golds).is_err());
    }

    #[test]
    fn truncation_drops_farthest() {
        let ex = Example::new("t").with_field("text", "abc");
        let mut d = demos(&["first demo", "second demo", "third"]);
        let full = prompt_chars(&d, &ex, &sentiment()).unwrap();
        let dropped = fit_demonstrations(&mut d, &ex, &sentiment(), Some(full - 1)).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(d.ids, ["d1", "d2"]);
        let dropped = fit_demonstrations(&mut d, &ex, &sentiment(), Some(1)).unwrap();
        assert_eq!(dropped, 2);
        assert!(d.is_empty());
    }

    #[test]
    fn hypotheses_from_stub() {
        let server = StubServer::start(
            StubScript { completion: Some("Guten Tag\nmore".into()), ..Default::default() },
            StubMode::Normal,
        )
        .unwrap();
        let remote = RemoteScorer::new(RemoteConfig::new(server.url(), "stub")).unwrap();
        let t = Template::generation("[src]: <X'> [tgt]: <Y'>", "English", "German").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut w = HypothesisWriter::create(dir.path()).unwrap();
        for i in 0..3 {
            let ex = Example::new(format!("{i}")).with_field("source", format!("hello {i}")).with_field("target", "x");
            let p = generate_hypothesis::<f64, _>(&remote, &demos(&[]), &ex, &t, 16, "\n").unwrap();
            assert_eq!(p.hypothesis.as_deref(), Some("Guten Tag"));
            w.write(ex.field("source").unwrap(), p.hypothesis.as_deref().unwrap(), "x").unwrap();
        }
        assert_eq!(w.finish().unwrap(), (3, 0));
        let hyp = std::fs::read_to_string(dir.path().join(HypothesisWriter::HYPOTHESIS_FILE)).unwrap();
        assert_eq!(hyp, "Guten Tag\nGuten Tag\nGuten Tag\n");
        let src = std::fs::read_to_string(dir.path().join(HypothesisWriter::SOURCE_FILE)).unwrap();
        assert_eq!(src.lines().collect::<Vec<_>>(), ["hello 0", "hello 1", "hello 2"]);
    }

    #[test]
    fn stop_at_start_gives_empty() {
        let server = StubServer::start(
            StubScript { completion: Some("\nlater".into()), ..Default::default() },
            StubMode::Normal,
        )
        .unwrap();
        let remote = RemoteScorer::new(RemoteConfig::new(server.url(), "stub")).unwrap();
        let t = Template::generation("[src]: <X'> [tgt]: <Y'>", "English", "German").unwrap();
        let ex = Example::new("0").with_field("source", "hi");
        let p = generate_hypothesis::<f64, _>(&remote, &demos(&[]), &ex, &t, 8, "\n").unwrap();
        assert_eq!(p.hypothesis.as_deref(), Some(""));
    }

    #[test]
    fn report_counts() {
        let mut a = pred("1", "x");
        a.gold = Some("x".into());
        a.domain = Some("food".into());
        let mut b = pred("0", "y");
        b.gold = Some("x".into());
        b.domain = Some("tech".into());
        let r = EvalReport::from_predictions(Method::TopK, 0, 1, 1, "s", vec![a, b], 0, 0).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.predictions[0].id, "0");
        assert_eq!(r.per_domain["food"].accuracy, 1.0);
        assert_eq!(r.per_domain["tech"].accuracy, 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("wall_time"));
    }

    proptest! {
        #[test]
        fn argmin_ignores_insertion_order(values in proptest::collection::btree_map(0u8..8, 0u8..4, 1..8)) {
            let entries: Vec<(String, f64)> = values.iter().map(|(k, v)| (format!("l{k}"), *v as f64)).collect();
            let fwd: BTreeMap<String, f64> = entries.iter().cloned().collect();
            let rev: BTreeMap<String, f64> = entries.iter().rev().cloned().collect();
            let want = entries
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .map(|(k, _)| k.clone());
            prop_assert_eq!(argmin(&fwd).map(str::to_string), want.clone());
            prop_assert_eq!(argmin(&rev).map(str::to_string), want);
        }

        #[test]
        fn accuracy_permutation_invariant(labels in proptest::collection::vec(0u8..3, 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let preds: Vec<Prediction> = labels.iter().enumerate().map(|(i, l)| pred(&format!("{i:03}"), &format!("{l}"))).collect();
            let golds: BTreeMap<String, String> = (0..labels.len()).map(|i| (format!("{i:03}"), "1".to_string())).collect();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(accuracy(&preds, &golds).unwrap(), accuracy(&shuffled, &golds).unwrap());
        }
    }
}
