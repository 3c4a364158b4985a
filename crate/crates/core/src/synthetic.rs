//! A two-domain synthetic classification task for desk-scale experiments.
//!
//! Each input is nine words: a subject chunk, a setting chunk and a cue
//! phrase, three words each. The label is decided by the cue phrase alone;
//! cue phrases come in pairs that differ only in their last word, one per
//! label. The template puts the label right after that last word, so a
//! scorer that learns from its context can read the label off any
//! demonstration sharing the test input's cue.
//!
//! The scorer is a bigram model trained on unlabeled pool inputs, so label
//! words are unknown to it and every label preference comes from the
//! demonstrations through the in-context cache.
//!
//! In the adversarial variant every test input gets a decoy in the pool that
//! shares its subject, setting and the first two cue words but carries the
//! opposite cue word and label. The decoy is the nearest neighbour of the
//! test input by word overlap, while demonstrations that repeat the full cue
//! explain the input better.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_json_lines, Dataset, Example, Template};
use crate::scoring::{ngram_train, NgramConfig, NgramModel, ScoreError};

pub const NEGATIVE: &str = "negative";
pub const POSITIVE: &str = "positive";

struct Domain {
    name: &'static str,
    subjects: [&'static str; 6],
    settings: [&'static str; 6],
    /// Shared first two cue words, positive word, negative word.
    cues: [(&'static str, &'static str, &'static str); 3],
}

const DOMAINS: [Domain; 2] = [
    Domain {
        name: "food",
        subjects: [
            "spicy ramen bowl",
            "crispy duck legs",
            "garlic butter shrimp",
            "smoked brisket plate",
            "lemon tart slice",
            "mushroom risotto dish",
        ],
        settings: [
            "near harbor street",
            "downtown bistro tonight",
            "family diner sunday",
            "rooftop terrace lunch",
            "corner cafe brunch",
            "seaside grill dinner",
        ],
        cues: [
            ("flavor felt", "rich", "flat"),
            ("staff seemed", "friendly", "rude"),
            ("portion looked", "generous", "tiny"),
        ],
    },
    Domain {
        name: "tech",
        subjects: [
            "wireless mouse model",
            "gaming laptop rig",
            "smart watch band",
            "mesh router kit",
            "mechanical keyboard switches",
            "noise cancelling headphones",
        ],
        settings: [
            "after firmware update",
            "during long commute",
            "for office work",
            "under heavy load",
            "with default settings",
            "on airplane mode",
        ],
        cues: [
            ("battery life", "lasted", "drained"),
            ("setup process", "smooth", "painful"),
            ("build quality", "solid", "flimsy"),
        ],
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub pool_per_domain: usize,
    pub test_per_domain: usize,
    pub adversarial: bool,
    pub seed: u64,
    /// Cache weight of the bigram scorer.
    pub cache_weight: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pool_per_domain: 120,
            test_per_domain: 30,
            adversarial: false,
            seed: 7,
            cache_weight: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub pool: Dataset,
    pub test: Dataset,
    pub template: Template,
    /// Unlabeled texts the scorer is trained on.
    pub scorer_corpus: Vec<String>,
    pub scorer_config: NgramConfig,
}

impl SyntheticTask {
    pub fn scorer(&self) -> Result<NgramModel, ScoreError> {
        ngram_train(&self.scorer_corpus, self.scorer_config.clone())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Draw {
    domain: usize,
    subject: usize,
    setting: usize,
    cue: usize,
    positive: bool,
}

impl Draw {
    fn random(rng: &mut ChaCha8Rng, domain: usize) -> Self {
        Self {
            domain,
            subject: rng.random_range(0..6),
            setting: rng.random_range(0..6),
            cue: rng.random_range(0..3),
            positive: rng.random_bool(0.5),
        }
    }

    fn text(&self) -> String {
        let d = &DOMAINS[self.domain];
        let (stem, pos, neg) = d.cues[self.cue];
        let last = if self.positive { pos } else { neg };
        format!(
            "{} {} {stem} {last}",
            d.subjects[self.subject], d.settings[self.setting]
        )
    }

    fn example(&self, id: String) -> Example {
        Example::new(id)
            .with_field("text", self.text())
            .with_label(if self.positive { POSITIVE } else { NEGATIVE })
            .with_domain(DOMAINS[self.domain].name)
    }
}

/// The template used by the task: the label follows the input directly.
pub fn synthetic_template() -> Template {
    Template::classification([(NEGATIVE, format!("<X> {NEGATIVE}")), (POSITIVE, format!("<X> {POSITIVE}"))])
        .expect("two distinct labels")
}

/// Builds the task deterministically from `config.seed`.
pub fn synthetic_task(config: &SyntheticConfig) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tests = Vec::new();
    for domain in 0..DOMAINS.len() {
        let mut drawn = 0;
        while drawn < config.test_per_domain {
            let d = Draw::random(&mut rng, domain);
            // A decoy must never be another test input.
            if config.adversarial && tests.iter().any(|t: &Draw| Draw { positive: t.positive, ..d } == *t) {
                continue;
            }
            tests.push(d);
            drawn += 1;
        }
    }
    let mut pool = Vec::new();
    for domain in 0..DOMAINS.len() {
        while pool.iter().filter(|d: &&Draw| d.domain == domain).count() < config.pool_per_domain {
            let d = Draw::random(&mut rng, domain);
            // Keep the decoy the unique nearest neighbour.
            if config.adversarial && tests.contains(&d) {
                continue;
            }
            pool.push(d);
        }
    }
    if config.adversarial {
        for t in &tests {
            pool.push(Draw {
                positive: !t.positive,
                ..*t
            });
        }
    }
    let names = ["f", "t"];
    let pool_examples: Vec<Example> = pool
        .iter()
        .enumerate()
        .map(|(i, d)| d.example(format!("p{}{i:04}", names[d.domain])))
        .collect();
    let test_examples: Vec<Example> = tests
        .iter()
        .enumerate()
        .map(|(i, d)| d.example(format!("q{}{i:04}", names[d.domain])))
        .collect();
    let scorer_corpus = pool.iter().map(Draw::text).collect();
    SyntheticTask {
        pool: Dataset::from_examples("synthetic-pool", pool_examples),
        test: Dataset::from_examples("synthetic-test", test_examples),
        template: synthetic_template(),
        scorer_corpus,
        scorer_config: NgramConfig {
            cache_weight: config.cache_weight,
            ..NgramConfig::default()
        },
    }
}

/// Paths of a task written by [`write_task`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticFiles {
    pub pool: PathBuf,
    pub test: PathBuf,
    pub template: PathBuf,
    /// Run config naming the files above and the task's scorer settings.
    pub config: PathBuf,
}

/// Writes the pool, test set, template and a run config into `dir`.
pub fn write_task(task: &SyntheticTask, dir: impl AsRef<Path>) -> crate::Result<SyntheticFiles> {
    let dir = dir.as_ref();
    let write = |name: &str, text: String| -> crate::Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| crate::Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    fs::create_dir_all(dir).map_err(|source| crate::Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut template = String::new();
    for label in task.template.labels() {
        let pattern = task.template.pattern(label).unwrap_or_default();
        template.push_str(&serde_json::json!({ "label": label, "pattern": pattern }).to_string());
        template.push('\n');
    }
    let c = &task.scorer_config;
    let config = format!(
        "pool = pool.jsonl\ntest = test.jsonl\ntemplate = template.jsonl\nscorer = ngram\n\
         ngram-order = {}\nngram-k = {}\nngram-cache-weight = {}\n",
        c.order, c.k, c.cache_weight
    );
    Ok(SyntheticFiles {
        pool: write("pool.jsonl", write_json_lines(&task.pool.examples))?,
        test: write("test.jsonl", write_json_lines(&task.test.examples))?,
        template: write("template.jsonl", template)?,
        config: write("run.conf", config)?,
    })
}
