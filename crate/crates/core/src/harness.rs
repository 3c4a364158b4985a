//! Experiment orchestration: run configuration, seeded evaluation runs,
//! ablations, order sensitivity, the input-noise experiment, the per-method
//! entropy analysis and hypothesis emission for generation tasks.
//!
//! Every operation returns an [`ExperimentReport`] whose JSON form depends
//! only on the configuration and seeds. Wall-clock timings are kept out of
//! the report and written to a sidecar file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cone::{
    select_demonstrations, test_input, ConeMode, DemonstrationSet, EntropyItem, Method,
    MethodEntropy, OrderPolicy, RetrieverKind, SelectionParams,
};
use crate::corpus::{load_dataset, span_shuffle, DatasetFormat, TaskKind};
use crate::inference::{
    classify, drop_farthest, fit_demonstrations, generate_hypothesis, EvalReport,
    HypothesisWriter, Prediction,
};
use crate::num::mean_variance;
use crate::retrieval::{derive_seed, load_embeddings, HashEmbedder, QueryVectors};
use crate::scoring::{
    ngram_train, CachedScorer, LogBase, NgramConfig, RemoteConfig, RemoteScorer, ScoreCache,
    ScoreError,
};
use crate::{
    Bm25Index, Bm25Params, Dataset, EmbeddingIndex, Error, Example, Result, Retriever,
    ScorerHandle, Selection, Template,
};

/// Version stamped into every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScorerKind {
    /// n-gram model trained on the pool inputs or on `ngram-corpus`.
    #[default]
    Ngram,
    /// Completion server reached over HTTP.
    Remote,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Ngram => "ngram",
            ScorerKind::Remote => "remote",
        }
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ngram" => Ok(ScorerKind::Ngram),
            "remote" => Ok(ScorerKind::Remote),
            _ => Err(Error::Config(format!("unknown scorer {s:?}"))),
        }
    }
}

/// Everything a run depends on.
///
/// The text form is one `key = value` pair per line; `#` starts a comment
/// line and values in double quotes may use `\n`, `\t`, `\"` and `\\`.
/// Keys are the kebab-case names listed in [`RunConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pool: PathBuf,
    pub test: PathBuf,
    /// Built-in template id or template file.
    pub template: String,
    /// Overrides the template's demonstration separator.
    pub separator: Option<String>,
    pub method: Method,
    /// Shot count N; defaults to 4 with a prompt limit and 8 without.
    pub shots: Option<usize>,
    /// Candidate pool size K.
    pub candidates: usize,
    /// Overrides the retriever implied by the method.
    pub retriever: Option<RetrieverKind>,
    pub cone_mode: ConeMode,
    pub order: OrderPolicy,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// `id v1 ... vd` vectors for pool and test ids; without it inputs are
    /// embedded with [`HashEmbedder`].
    pub embeddings: Option<PathBuf>,
    pub embed_dim: usize,
    pub scorer: ScorerKind,
    pub ngram_order: usize,
    pub ngram_k: f64,
    pub ngram_cache_weight: f64,
    /// One training text per line; defaults to the pool inputs.
    pub ngram_corpus: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: String,
    pub log_base: LogBase,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Persistent score cache; remote scorers use an in-memory cache
    /// without it.
    pub cache_dir: Option<PathBuf>,
    /// Length-normalize label scores.
    pub normalize: bool,
    pub seeds: Vec<u64>,
    /// Evaluate on span-shuffled test inputs.
    pub noise: bool,
    pub noise_ratio: f64,
    pub permutations: usize,
    pub shot_list: Vec<usize>,
    pub candidate_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub max_prompt_chars: Option<usize>,
    pub max_new_tokens: usize,
    pub stop: String,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pool: PathBuf::new(),
            test: PathBuf::new(),
            template: String::new(),
            separator: None,
            method: Method::TopKCone,
            shots: None,
            candidates: 30,
            retriever: None,
            cone_mode: ConeMode::PerCandidate,
            order: OrderPolicy::BestLast,
            bm25_k1: 1.5,
            bm25_b: 0.75,
            embeddings: None,
            embed_dim: HashEmbedder::default().dim,
            scorer: ScorerKind::Ngram,
            ngram_order: 2,
            ngram_k: 0.1,
            ngram_cache_weight: 0.0,
            ngram_corpus: None,
            endpoint: None,
            model: "default".into(),
            log_base: LogBase::Natural,
            max_retries: 3,
            max_in_flight: 4,
            cache_dir: None,
            normalize: false,
            seeds: vec![0, 1, 2],
            noise: false,
            noise_ratio: 1.0,
            permutations: 10,
            shot_list: vec![0, 1, 2, 4, 8, 16],
            candidate_list: vec![10, 20, 30, 40, 50],
            methods: vec![Method::Random, Method::TopK, Method::TopKCone],
            max_prompt_chars: None,
            max_new_tokens: 64,
            stop: "\n".into(),
            out: PathBuf::from("out"),
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected on or off"))),
    }
}

fn none_if_empty(value: &str) -> Option<&str> {
    (!value.is_empty() && value != "none").then_some(value)
}

fn unquote(raw: &str) -> Result<String> {
    let raw = raw.trim();
    let Some(inner) = raw
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .filter(|_| raw.len() >= 2)
    else {
        return Ok(raw.to_string());
    };
    let mut out = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('"') => out.push('"'),
            Some('\\') => out.push('\\'),
            other => return Err(Error::Config(format!("bad escape \\{}", other.unwrap_or(' ')))),
        }
    }
    Ok(out)
}

fn quote(value: &str) -> String {
    let plain = !value.is_empty()
        && value.trim() == value
        && !value.starts_with('"')
        && !value.chars().any(|c| c.is_control() || c == '\\');
    if plain {
        return value.to_string();
    }
    let mut out = String::from("\"");
    for c in value.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`].
    pub const KEYS: [&'static str; 38] = [
        "pool", "test", "template", "separator", "method", "shots", "candidates", "retriever",
        "cone-mode", "order", "bm25-k1", "bm25-b", "embeddings", "embed-dim", "scorer",
        "ngram-order", "ngram-k", "ngram-cache-weight", "ngram-corpus", "endpoint", "model",
        "log-base", "max-retries", "max-in-flight", "cache-dir", "normalize", "seeds", "noise",
        "noise-ratio", "permutations", "shot-list", "candidate-list", "methods",
        "max-prompt-chars", "max-new-tokens", "stop", "out", "jobs",
    ];

    /// Keys that change where or how fast a run happens but never its
    /// results; they are left out of the embedded config and its hash.
    pub const OPERATIONAL_KEYS: [&'static str; 3] = ["out", "jobs", "cache-dir"];

    /// Parses the text form on top of the defaults. Relative paths are kept
    /// as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", idx + 1)))?;
            let value = unquote(value)?;
            config
                .set(key.trim(), &value)
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.pool);
        fix(&mut self.test);
        for p in [&mut self.embeddings, &mut self.ngram_corpus, &mut self.cache_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if Template::builtin(&self.template).is_none() && !self.template.is_empty() {
            let p = Path::new(&self.template);
            if p.is_relative() {
                self.template = base.join(p).display().to_string();
            }
        }
    }

    /// Sets one key; `_` and `-` are interchangeable in key names. Optional
    /// values are cleared by an empty value or `none`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('_', "-");
        let k = key.as_str();
        match k {
            "pool" => self.pool = value.into(),
            "test" => self.test = value.into(),
            "template" => self.template = value.into(),
            "separator" => self.separator = (value != "none").then(|| value.to_string()),
            "method" => self.method = parse_value(k, value)?,
            "shots" => self.shots = none_if_empty(value).map(|v| parse_value(k, v)).transpose()?,
            "candidates" => self.candidates = parse_value(k, value)?,
            "retriever" => {
                self.retriever = none_if_empty(value).map(|v| parse_value(k, v)).transpose()?
            }
            "cone-mode" => self.cone_mode = parse_value(k, value)?,
            "order" => self.order = parse_value(k, value)?,
            "bm25-k1" => self.bm25_k1 = parse_value(k, value)?,
            "bm25-b" => self.bm25_b = parse_value(k, value)?,
            "embeddings" => self.embeddings = none_if_empty(value).map(PathBuf::from),
            "embed-dim" => self.embed_dim = parse_value(k, value)?,
            "scorer" => self.scorer = parse_value(k, value)?,
            "ngram-order" => self.ngram_order = parse_value(k, value)?,
            "ngram-k" => self.ngram_k = parse_value(k, value)?,
            "ngram-cache-weight" => self.ngram_cache_weight = parse_value(k, value)?,
            "ngram-corpus" => self.ngram_corpus = none_if_empty(value).map(PathBuf::from),
            "endpoint" => self.endpoint = none_if_empty(value).map(str::to_string),
            "model" => self.model = value.into(),
            "log-base" => self.log_base = parse_value(k, value)?,
            "max-retries" => self.max_retries = parse_value(k, value)?,
            "max-in-flight" => self.max_in_flight = parse_value(k, value)?,
            "cache-dir" => self.cache_dir = none_if_empty(value).map(PathBuf::from),
            "normalize" => self.normalize = parse_bool(k, value)?,
            "seeds" => self.seeds = parse_list(k, value)?,
            "noise" => self.noise = parse_bool(k, value)?,
            "noise-ratio" => self.noise_ratio = parse_value(k, value)?,
            "permutations" => self.permutations = parse_value(k, value)?,
            "shot-list" => self.shot_list = parse_list(k, value)?,
            "candidate-list" => self.candidate_list = parse_list(k, value)?,
            "methods" => self.methods = parse_list(k, value)?,
            "max-prompt-chars" => {
                self.max_prompt_chars = none_if_empty(value).map(|v| parse_value(k, v)).transpose()?
            }
            "max-new-tokens" => self.max_new_tokens = parse_value(k, value)?,
            "stop" => self.stop = value.into(),
            "out" => self.out = value.into(),
            "jobs" => self.jobs = parse_value(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Shot count in effect: zero for prompting, otherwise `shots` or the
    /// default for the prompt limit.
    pub fn effective_shots(&self) -> usize {
        if self.method == Method::Prompting {
            return 0;
        }
        self.shots
            .unwrap_or(if self.max_prompt_chars.is_some() { 4 } else { 8 })
    }

    /// Retriever in effect for `method`.
    pub fn retriever_for(&self, method: Method) -> Option<RetrieverKind> {
        method.retriever().map(|r| self.retriever.unwrap_or(r))
    }

    /// Every key with its resolved value, in key order, operational keys
    /// included.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let pairs: [(&str, String); 38] = [
            ("pool", self.pool.display().to_string()),
            ("test", self.test.display().to_string()),
            ("template", self.template.clone()),
            ("separator", opt(self.separator.clone())),
            ("method", self.method.to_string()),
            ("shots", self.effective_shots().to_string()),
            ("candidates", self.candidates.to_string()),
            ("retriever", opt(self.retriever.map(|r| r.to_string()))),
            ("cone-mode", self.cone_mode.to_string()),
            ("order", self.order.to_string()),
            ("bm25-k1", self.bm25_k1.to_string()),
            ("bm25-b", self.bm25_b.to_string()),
            ("embeddings", opt_path(&self.embeddings)),
            ("embed-dim", self.embed_dim.to_string()),
            ("scorer", self.scorer.as_str().into()),
            ("ngram-order", self.ngram_order.to_string()),
            ("ngram-k", self.ngram_k.to_string()),
            ("ngram-cache-weight", self.ngram_cache_weight.to_string()),
            ("ngram-corpus", opt_path(&self.ngram_corpus)),
            ("endpoint", opt(self.endpoint.clone())),
            ("model", self.model.clone()),
            ("log-base", self.log_base.to_string()),
            ("max-retries", self.max_retries.to_string()),
            ("max-in-flight", self.max_in_flight.to_string()),
            ("cache-dir", opt_path(&self.cache_dir)),
            ("normalize", self.normalize.to_string()),
            ("seeds", join(&self.seeds)),
            ("noise", self.noise.to_string()),
            ("noise-ratio", self.noise_ratio.to_string()),
            ("permutations", self.permutations.to_string()),
            ("shot-list", join(&self.shot_list)),
            ("candidate-list", join(&self.candidate_list)),
            ("methods", join(&self.methods)),
            ("max-prompt-chars", opt(self.max_prompt_chars.map(|m| m.to_string()))),
            ("max-new-tokens", self.max_new_tokens.to_string()),
            ("stop", self.stop.clone()),
            ("out", self.out.display().to_string()),
            ("jobs", self.jobs.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The config in text form; parsing it gives back an equal config up to
    /// the shots default being made explicit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {}", quote(&v));
        }
        out
    }

    /// Result-affecting entries, as embedded in reports.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut e = self.entries();
        for k in Self::OPERATIONAL_KEYS {
            e.remove(k);
        }
        e
    }

    /// SHA-256 over the resolved `key=value` lines, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.resolved() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(quote(&v).as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Checks the invariants: K >= N, non-empty seeds, sane numbers, and
    /// that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let n = self.effective_shots();
        if self.candidates < n {
            return bad(format!("candidates K = {} is below shots N = {n}", self.candidates));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return bad(format!("noise-ratio {} is outside [0, 1]", self.noise_ratio));
        }
        if self.template.is_empty() {
            return bad("template is not set".into());
        }
        if self.scorer == ScorerKind::Remote
            && self.endpoint.is_none()
            && std::env::var(crate::scoring::ENDPOINT_ENV).is_err()
        {
            return bad(format!(
                "remote scorer needs an endpoint or {}",
                crate::scoring::ENDPOINT_ENV
            ));
        }
        let mut files: Vec<(&str, &Path)> = vec![("pool", &self.pool), ("test", &self.test)];
        if Template::builtin(&self.template).is_none() {
            files.push(("template", Path::new(&self.template)));
        }
        if let Some(p) = &self.embeddings {
            files.push(("embeddings", p));
        }
        if let Some(p) = &self.ngram_corpus {
            files.push(("ngram-corpus", p));
        }
        for (key, path) in files {
            if path.as_os_str().is_empty() {
                return bad(format!("{key} is not set"));
            }
            if !path.is_file() {
                return bad(format!("{key} file {} does not exist", path.display()));
            }
        }
        Ok(())
    }
}

/// Where a report came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
}

/// A seed run that failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunError {
    pub entry: String,
    pub seed: u64,
    pub message: String,
}

/// One configuration within an experiment, evaluated once per seed or
/// permutation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub label: String,
    pub method: Method,
    pub shots: usize,
    pub candidates: usize,
    /// Successful runs in seed order (permutation order for order
    /// sensitivity).
    pub runs: Vec<EvalReport>,
    /// `runs[i].accuracy`, repeated for direct recomputation.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population variance of `accuracies`.
    pub variance: f64,
}

impl ReportEntry {
    fn new(label: impl Into<String>, method: Method, shots: usize, candidates: usize) -> Self {
        Self {
            label: label.into(),
            method,
            shots,
            candidates,
            runs: Vec::new(),
            accuracies: Vec::new(),
            mean: 0.0,
            variance: 0.0,
        }
    }

    fn finish(mut self) -> Self {
        self.accuracies = self.runs.iter().map(|r| r.accuracy).collect();
        (self.mean, self.variance) = mean_variance(&self.accuracies);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSummary {
    pub ratio: f64,
    pub original_mean: f64,
    pub shuffled_mean: f64,
    /// `shuffled_mean - original_mean`.
    pub delta: f64,
    /// True when both runs of every seed used the same demonstrations.
    pub shared_demonstrations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyRow {
    pub method: Method,
    /// Conditional entropies over every (seed, test example) pair, seeds
    /// outer.
    pub entropy: MethodEntropy,
    pub accuracy_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRun {
    pub seed: u64,
    /// Directory holding the source, hypothesis and reference files.
    pub dir: String,
    pub lines: usize,
    pub empty_hypotheses: usize,
    pub truncated_demonstrations: usize,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub provenance: Provenance,
    /// False when any seed run failed; see `errors`.
    pub complete: bool,
    pub errors: Vec<RunError>,
    pub entries: Vec<ReportEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<Vec<EntropyRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<Vec<GenerationRun>>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExperimentReport {
    fn new(experiment: &str, config: &RunConfig) -> Self {
        Self {
            experiment: experiment.into(),
            provenance: Provenance {
                config_hash: config.hash(),
                version: VERSION.into(),
                config: config.resolved(),
            },
            complete: true,
            errors: Vec::new(),
            entries: Vec::new(),
            noise: None,
            entropy: None,
            generation: None,
            wall_time: Duration::ZERO,
        }
    }

    fn fail(&mut self, entry: &str, seed: u64, err: &Error) {
        log::error!("{entry} seed {seed}: {err}");
        self.complete = false;
        self.errors.push(RunError {
            entry: entry.into(),
            seed,
            message: err.to_string(),
        });
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Writes `<experiment>.json` and the `<experiment>.timing.json`
    /// sidecar into `dir`; returns the report path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(format!("{}.json", self.experiment));
        fs::write(&path, self.to_json()).map_err(io(&path))?;
        let mut runs = Vec::new();
        for e in &self.entries {
            for r in &e.runs {
                runs.push(serde_json::json!({
                    "entry": e.label,
                    "seed": r.seed,
                    "seconds": r.wall_time.as_secs_f64(),
                }));
            }
        }
        let timing = serde_json::json!({
            "total_seconds": self.wall_time.as_secs_f64(),
            "runs": runs,
        });
        let tpath = dir.join(format!("{}.timing.json", self.experiment));
        fs::write(&tpath, format!("{timing:#}\n")).map_err(io(&tpath))?;
        Ok(path)
    }
}

/// Loaded data, scorer, retrievers and worker pool for one configuration.
pub struct Experiment {
    config: RunConfig,
    pool: Dataset,
    test: Dataset,
    template: Template,
    scorer: ScorerHandle,
    workers: rayon::ThreadPool,
    bm25: Mutex<Option<Arc<Retriever>>>,
    knn: Mutex<Option<Arc<Retriever>>>,
}

/// Resolves a built-in template id or loads a template file.
pub fn resolve_template(config: &RunConfig) -> Result<Template> {
    let template = match Template::builtin(&config.template) {
        Some(t) => t,
        None => Template::load(&config.template)?,
    };
    Ok(match &config.separator {
        Some(sep) => template.with_separator(sep.clone()),
        None => template,
    })
}

/// Builds the configured scorer. The n-gram model trains on `ngram-corpus`
/// or, by default, on the input text of every pool example.
pub fn build_scorer(config: &RunConfig, pool: &Dataset, template: &Template) -> Result<ScorerHandle> {
    let cache = match &config.cache_dir {
        Some(dir) => Some(ScoreCache::on_disk(dir)?),
        None => None,
    };
    Ok(match config.scorer {
        ScorerKind::Ngram => {
            let corpus: Vec<String> = match &config.ngram_corpus {
                Some(path) => fs::read_to_string(path)
                    .map_err(|source| Error::Io {
                        path: path.clone(),
                        source,
                    })?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect(),
                None => pool.examples.iter().map(|e| template.input_text(e)).collect(),
            };
            let model = ngram_train(
                &corpus,
                NgramConfig {
                    order: config.ngram_order,
                    k: config.ngram_k,
                    cache_weight: config.ngram_cache_weight,
                    ..NgramConfig::default()
                },
            )?;
            match cache {
                Some(c) => Arc::new(CachedScorer::new(model, c)),
                None => Arc::new(model),
            }
        }
        ScorerKind::Remote => {
            let mut rc = RemoteConfig::from_env(config.endpoint.as_deref(), config.model.clone())?;
            rc.log_base = config.log_base;
            rc.max_retries = config.max_retries;
            rc.max_in_flight = config.max_in_flight;
            let remote = RemoteScorer::new(rc)?;
            Arc::new(CachedScorer::new(remote, cache.unwrap_or_else(ScoreCache::in_memory)))
        }
    })
}

/// Per-example outcome of a classification pass.
struct Classified {
    prediction: Prediction,
    truncated: usize,
}

impl Experiment {
    /// Validates `config`, loads the data and builds the scorer.
    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let template = resolve_template(&config)?;
        let pool = load_dataset(&config.pool, DatasetFormat::JsonLines, Some(&template))?;
        let scorer = build_scorer(&config, &pool, &template)?;
        Self::assemble(config, pool, template, scorer)
    }

    /// Like [`Experiment::prepare`] with a caller-supplied scorer.
    pub fn with_scorer(config: RunConfig, scorer: ScorerHandle) -> Result<Self> {
        config.validate()?;
        let template = resolve_template(&config)?;
        let pool = load_dataset(&config.pool, DatasetFormat::JsonLines, Some(&template))?;
        Self::assemble(config, pool, template, scorer)
    }

    fn assemble(config: RunConfig, pool: Dataset, template: Template, scorer: ScorerHandle) -> Result<Self> {
        let test = load_dataset(&config.test, DatasetFormat::JsonLines, Some(&template))?;
        if pool.is_empty() || test.is_empty() {
            return Err(Error::Config("pool and test sets must not be empty".into()));
        }
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            config,
            pool,
            test,
            template,
            scorer,
            workers,
            bm25: Mutex::new(None),
            knn: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn pool(&self) -> &Dataset {
        &self.pool
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn scorer(&self) -> &ScorerHandle {
        &self.scorer
    }

    fn build_knn(&self) -> Result<Retriever> {
        let pool_ids: Vec<&str> = self.pool.ids().collect();
        Ok(match &self.config.embeddings {
            Some(path) => {
                let wanted: Vec<&str> = pool_ids.iter().copied().chain(self.test.ids()).collect();
                let table: EmbeddingIndex = load_embeddings(path, &wanted)?;
                Retriever::Knn {
                    index: table.subset(&pool_ids)?,
                    queries: QueryVectors::Table(table),
                }
            }
            None => {
                let e = HashEmbedder {
                    dim: self.config.embed_dim,
                };
                let index = EmbeddingIndex::from_vectors(
                    self.pool
                        .examples
                        .iter()
                        .map(|x| (x.id.clone(), e.embed(&self.template.input_text(x)))),
                )?;
                Retriever::Knn {
                    index,
                    queries: QueryVectors::Embedder(e),
                }
            }
        })
    }

    fn build_bm25(&self) -> Result<Retriever> {
        let docs = self
            .pool
            .examples
            .iter()
            .map(|x| (x.id.clone(), self.template.input_text(x)));
        let params = Bm25Params::new(self.config.bm25_k1, self.config.bm25_b)?;
        Ok(Retriever::Bm25(Bm25Index::from_documents(docs, params)?))
    }

    /// The retriever for `kind`; only random sampling depends on the seed.
    pub fn retriever(&self, kind: RetrieverKind, seed: u64) -> Result<Arc<Retriever>> {
        let (slot, build): (_, fn(&Self) -> Result<Retriever>) = match kind {
            RetrieverKind::Random => {
                return Ok(Arc::new(Retriever::Random {
                    pool: self.pool.ids().map(str::to_string).collect(),
                    seed,
                }))
            }
            RetrieverKind::Bm25 => (&self.bm25, Self::build_bm25),
            RetrieverKind::Knn => (&self.knn, Self::build_knn),
        };
        let mut guard = slot.lock().expect("retriever lock");
        if let Some(r) = guard.as_ref() {
            return Ok(r.clone());
        }
        let r = Arc::new(build(self)?);
        *guard = Some(r.clone());
        Ok(r)
    }

    /// Maps `f` over the test set on the worker pool. Work is scheduled in
    /// a seeded order; results come back in test-set order and the first
    /// error in that order wins.
    fn map_tests<T: Send>(
        &self,
        seed: u64,
        f: impl Fn(usize, &Example) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let mut order: Vec<usize> = (0..self.test.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "order")));
        let examples = &self.test.examples;
        let mut done: Vec<(usize, Result<T>)> = self.workers.install(|| {
            order
                .par_iter()
                .map(|&i| (i, f(i, &examples[i])))
                .collect()
        });
        done.sort_by_key(|(i, _)| *i);
        done.into_iter().map(|(_, r)| r).collect()
    }

    fn params(&self, method: Method, shots: usize, candidates: usize) -> SelectionParams {
        SelectionParams {
            method,
            candidates,
            shots: if method == Method::Prompting { 0 } else { shots },
            mode: self.config.cone_mode,
            order: self.config.order,
        }
    }

    /// Selects demonstrations for every test example.
    pub fn select_all(&self, params: &SelectionParams, seed: u64) -> Result<Vec<Selection>> {
        if params.candidates < params.shots {
            return Err(Error::Config(format!(
                "candidates K = {} is below shots N = {}",
                params.candidates, params.shots
            )));
        }
        let retriever = match self.config.retriever_for(params.method) {
            Some(kind) if params.shots > 0 => Some(self.retriever(kind, seed)?),
            _ => None,
        };
        self.map_tests(seed, |_, test| {
            select_demonstrations(
                &self.pool,
                test,
                &self.template,
                retriever.as_deref(),
                &*self.scorer,
                params,
            )
        })
    }

    /// Classifies `test` after fitting the prompt into the character limit;
    /// a backend context overflow drops one more demonstration and retries.
    fn classify_one(&self, mut demos: DemonstrationSet, test: &Example) -> Result<Classified> {
        let mut truncated =
            fit_demonstrations(&mut demos, test, &self.template, self.config.max_prompt_chars)?;
        loop {
            match classify(&*self.scorer, &demos, test, &self.template, self.config.normalize) {
                Err(Error::Score(ScoreError::ContextOverflow(msg))) if !demos.is_empty() => {
                    log::warn!("{}: context overflow ({msg}), dropping a demonstration", test.id);
                    drop_farthest(&mut demos);
                    truncated += 1;
                }
                r => return r.map(|prediction| Classified { prediction, truncated }),
            }
        }
    }

    /// Test example as evaluated: span-shuffled inputs when noise is on.
    fn perturbed(&self, test: &Example, seed: u64, ratio: Option<f64>) -> Example {
        match ratio {
            Some(r) => shuffle_inputs(&self.template, test, seed, r),
            None => test.clone(),
        }
    }

    /// Classifies every test example with the given demonstrations.
    fn evaluate(
        &self,
        params: &SelectionParams,
        seed: u64,
        demos: &[DemonstrationSet],
        clipped: usize,
        noise: Option<f64>,
    ) -> Result<EvalReport> {
        let start = Instant::now();
        let out = self.map_tests(seed, |i, test| {
            self.classify_one(demos[i].clone(), &self.perturbed(test, seed, noise))
        })?;
        let truncated = out.iter().map(|c| c.truncated).sum();
        let predictions = out.into_iter().map(|c| c.prediction).collect();
        let mut report = EvalReport::from_predictions(
            params.method,
            seed,
            params.shots,
            params.candidates,
            self.scorer.model_id(),
            predictions,
            truncated,
            clipped,
        )?;
        report.wall_time = start.elapsed();
        Ok(report)
    }

    fn check_classification(&self) -> Result<()> {
        if self.template.kind() != TaskKind::Classification {
            return Err(Error::WrongTaskKind("classification"));
        }
        Ok(())
    }

    fn configured_noise(&self) -> Option<f64> {
        self.config.noise.then_some(self.config.noise_ratio)
    }

    /// Selection plus classification for one seed.
    fn run_seed(&self, params: &SelectionParams, seed: u64) -> Result<EvalReport> {
        let start = Instant::now();
        let selections = self.select_all(params, seed)?;
        let clipped = selections.iter().filter(|s| s.clipped).count();
        let demos: Vec<DemonstrationSet> = selections.into_iter().map(|s| s.demos).collect();
        let mut report = self.evaluate(params, seed, &demos, clipped, self.configured_noise())?;
        report.wall_time = start.elapsed();
        log::info!(
            "{} N={} K={} seed {seed}: accuracy {:.4} ({:.1?})",
            params.method.as_str(),
            params.shots,
            params.candidates,
            report.accuracy,
            report.wall_time
        );
        Ok(report)
    }

    fn entry(&self, report: &mut ExperimentReport, label: String, params: SelectionParams) {
        let mut entry = ReportEntry::new(label, params.method, params.shots, params.candidates);
        for &seed in &self.config.seeds {
            match self.run_seed(&params, seed) {
                Ok(r) => entry.runs.push(r),
                Err(e) => report.fail(&entry.label, seed, &e),
            }
        }
        report.entries.push(entry.finish());
    }

    fn timed(&self, name: &str, body: impl FnOnce(&mut ExperimentReport) -> Result<()>) -> Result<ExperimentReport> {
        let start = Instant::now();
        let mut report = ExperimentReport::new(name, &self.config);
        body(&mut report)?;
        report.wall_time = start.elapsed();
        Ok(report)
    }

    /// The configured method evaluated once per seed.
    pub fn run_eval(&self) -> Result<ExperimentReport> {
        self.check_classification()?;
        self.timed("eval", |report| {
            let c = &self.config;
            let params = self.params(c.method, c.effective_shots(), c.candidates);
            self.entry(report, c.method.to_string(), params);
            Ok(())
        })
    }

    /// One entry per shot count; N = 0 is the zero-shot baseline.
    pub fn run_ablation_shots(&self, shots: &[usize]) -> Result<ExperimentReport> {
        self.check_classification()?;
        if shots.is_empty() {
            return Err(Error::Config("shot list must not be empty".into()));
        }
        let c = &self.config;
        if let Some(&n) = shots.iter().find(|&&n| n > c.candidates) {
            return Err(Error::Config(format!(
                "shots N = {n} exceeds candidates K = {}",
                c.candidates
            )));
        }
        self.timed("ablate-shots", |report| {
            for &n in shots {
                let method = if n == 0 { Method::Prompting } else { c.method };
                self.entry(report, format!("N={n}"), self.params(method, n, c.candidates));
            }
            Ok(())
        })
    }

    /// One entry per candidate pool size; every K must be at least N.
    pub fn run_ablation_candidates(&self, candidates: &[usize]) -> Result<ExperimentReport> {
        self.check_classification()?;
        if candidates.is_empty() {
            return Err(Error::Config("candidate list must not be empty".into()));
        }
        let c = &self.config;
        let n = c.effective_shots();
        if let Some(&k) = candidates.iter().find(|&&k| k < n) {
            return Err(Error::Config(format!("candidates K = {k} is below shots N = {n}")));
        }
        self.timed("ablate-candidates", |report| {
            for &k in candidates {
                self.entry(report, format!("K={k}"), self.params(c.method, n, k));
            }
            Ok(())
        })
    }

    /// Fixes the selected demonstrations per seed and evaluates `count`
    /// seeded orderings of them; one entry per seed with one run per
    /// permutation.
    pub fn run_order_sensitivity(&self, count: usize) -> Result<ExperimentReport> {
        self.check_classification()?;
        let c = &self.config;
        let n = c.effective_shots();
        if n < 2 {
            return Err(Error::Config(format!("order sensitivity needs N >= 2, got {n}")));
        }
        if count == 0 {
            return Err(Error::Config("permutation count must be at least 1".into()));
        }
        let params = self.params(c.method, n, c.candidates);
        self.timed("order-sensitivity", |report| {
            for &seed in &c.seeds {
                let label = format!("seed={seed}");
                let mut entry = ReportEntry::new(label.clone(), params.method, n, params.candidates);
                let selections = match self.select_all(&params, seed) {
                    Ok(s) => s,
                    Err(e) => {
                        report.fail(&label, seed, &e);
                        report.entries.push(entry.finish());
                        continue;
                    }
                };
                let clipped = selections.iter().filter(|s| s.clipped).count();
                for p in 0..count {
                    let demos: Vec<DemonstrationSet> = selections
                        .iter()
                        .zip(&self.test.examples)
                        .map(|(s, t)| permute(&s.demos, derive_seed(seed, &format!("perm/{p}/{}", t.id))))
                        .collect();
                    match self.evaluate(&params, seed, &demos, clipped, self.configured_noise()) {
                        Ok(r) => entry.runs.push(r),
                        Err(e) => report.fail(&format!("{label}/perm={p}"), seed, &e),
                    }
                }
                report.entries.push(entry.finish());
            }
            Ok(())
        })
    }

    /// Original against span-shuffled test inputs with the demonstrations
    /// selected on the original inputs. Entries: `original`, `shuffled`.
    pub fn run_noise_experiment(&self) -> Result<ExperimentReport> {
        self.check_classification()?;
        let c = &self.config;
        let params = self.params(c.method, c.effective_shots(), c.candidates);
        self.timed("noise", |report| {
            let mut original = ReportEntry::new("original", params.method, params.shots, params.candidates);
            let mut shuffled = ReportEntry::new("shuffled", params.method, params.shots, params.candidates);
            let mut shared = true;
            for &seed in &c.seeds {
                let outcome = self.select_all(&params, seed).and_then(|selections| {
                    let clipped = selections.iter().filter(|s| s.clipped).count();
                    let demos: Vec<DemonstrationSet> = selections.into_iter().map(|s| s.demos).collect();
                    let a = self.evaluate(&params, seed, &demos, clipped, None)?;
                    let b = self.evaluate(&params, seed, &demos, clipped, Some(c.noise_ratio))?;
                    Ok((a, b))
                });
                match outcome {
                    Ok((a, b)) => {
                        shared &= a
                            .predictions
                            .iter()
                            .zip(&b.predictions)
                            .all(|(x, y)| x.demonstrations == y.demonstrations);
                        original.runs.push(a);
                        shuffled.runs.push(b);
                    }
                    Err(e) => report.fail("noise", seed, &e),
                }
            }
            let (original, shuffled) = (original.finish(), shuffled.finish());
            report.noise = Some(NoiseSummary {
                ratio: c.noise_ratio,
                original_mean: original.mean,
                shuffled_mean: shuffled.mean,
                delta: shuffled.mean - original.mean,
                shared_demonstrations: shared,
            });
            report.entries.push(original);
            report.entries.push(shuffled);
            Ok(())
        })
    }

    /// Mean conditional entropy of the test input given each method's
    /// demonstrations, alongside accuracy. One row and one entry per method.
    pub fn run_entropy_analysis(&self, methods: &[Method]) -> Result<ExperimentReport> {
        self.check_classification()?;
        if methods.is_empty() {
            return Err(Error::Config("method list must not be empty".into()));
        }
        let c = &self.config;
        self.timed("entropy-analysis", |report| {
            let mut items: BTreeMap<String, Vec<EntropyItem>> = BTreeMap::new();
            let mut entries = Vec::new();
            for &method in methods {
                let params = self.params(method, c.effective_shots(), c.candidates);
                let mut entry = ReportEntry::new(method.to_string(), method, params.shots, params.candidates);
                let list = items.entry(method.to_string()).or_default();
                for &seed in &c.seeds {
                    let outcome = self.select_all(&params, seed).and_then(|selections| {
                        let clipped = selections.iter().filter(|s| s.clipped).count();
                        let demos: Vec<DemonstrationSet> = selections.into_iter().map(|s| s.demos).collect();
                        let mut seed_items = Vec::new();
                        for (d, t) in demos.iter().zip(&self.test.examples) {
                            seed_items.push(EntropyItem {
                                id: format!("{seed}/{}", t.id),
                                demos: d.texts.clone(),
                                x: test_input(&self.template, t)?,
                            });
                        }
                        let r = self.evaluate(&params, seed, &demos, clipped, None)?;
                        Ok((seed_items, r))
                    });
                    match outcome {
                        Ok((seed_items, r)) => {
                            list.extend(seed_items);
                            entry.runs.push(r);
                        }
                        Err(e) => report.fail(method.as_str(), seed, &e),
                    }
                }
                entries.push(entry.finish());
            }
            let scorer = &*self.scorer;
            let sep = self.template.separator();
            let entropy = self
                .workers
                .install(|| crate::cone::method_entropy_report(scorer, &items, sep))?;
            report.entropy = Some(
                entries
                    .iter()
                    .map(|e| EntropyRow {
                        method: e.method,
                        entropy: entropy[e.method.as_str()].clone(),
                        accuracy_mean: e.mean,
                    })
                    .collect(),
            );
            report.entries = entries;
            Ok(())
        })
    }

    /// Generates a hypothesis per test example and seed into
    /// `<out>/mt/seed-<s>/`.
    pub fn run_emit_mt(&self) -> Result<ExperimentReport> {
        if self.template.kind() != TaskKind::Generation {
            return Err(Error::WrongTaskKind("generation"));
        }
        let c = &self.config;
        let params = self.params(c.method, c.effective_shots(), c.candidates);
        let target = self
            .template
            .required_fields()
            .into_iter()
            .find(|f| !self.template.input_fields().contains(f))
            .ok_or_else(|| Error::Config("generation template has no target field".into()))?;
        self.timed("emit-mt", |report| {
            let mut runs = Vec::new();
            for &seed in &c.seeds {
                let rel = format!("mt/seed-{seed}");
                let dir = c.out.join(&rel);
                let outcome = self.select_all(&params, seed).and_then(|selections| {
                    let out = self.map_tests(seed, |i, test| {
                        let mut demos = selections[i].demos.clone();
                        let mut truncated =
                            fit_demonstrations(&mut demos, test, &self.template, c.max_prompt_chars)?;
                        loop {
                            match generate_hypothesis(
                                &*self.scorer,
                                &demos,
                                test,
                                &self.template,
                                c.max_new_tokens,
                                &c.stop,
                            ) {
                                Err(Error::Score(ScoreError::ContextOverflow(_))) if !demos.is_empty() => {
                                    drop_farthest(&mut demos);
                                    truncated += 1;
                                }
                                r => return r.map(|p| (p, truncated)),
                            }
                        }
                    })?;
                    let mut writer = HypothesisWriter::create(&dir)?;
                    for ((p, _), t) in out.iter().zip(&self.test.examples) {
                        writer.write(
                            &self.template.input_text(t),
                            p.hypothesis.as_deref().unwrap_or(""),
                            t.field(&target).unwrap_or(""),
                        )?;
                    }
                    let (lines, empty) = writer.finish()?;
                    Ok(GenerationRun {
                        seed,
                        dir: rel.clone(),
                        lines,
                        empty_hypotheses: empty,
                        truncated_demonstrations: out.iter().map(|(_, t)| t).sum(),
                        predictions: out.into_iter().map(|(p, _)| p).collect(),
                    })
                });
                match outcome {
                    Ok(run) => runs.push(run),
                    Err(e) => report.fail("emit-mt", seed, &e),
                }
            }
            report.generation = Some(runs);
            Ok(())
        })
    }
}

/// Seeded shuffle of a demonstration set, ids and texts together.
pub fn permute(demos: &DemonstrationSet, seed: u64) -> DemonstrationSet {
    let mut idx: Vec<usize> = (0..demos.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    DemonstrationSet {
        ids: idx.iter().map(|&i| demos.ids[i].clone()).collect(),
        texts: idx.iter().map(|&i| demos.texts[i].clone()).collect(),
        order: demos.order,
    }
}

/// Span-shuffles every input field of `test` with a seed derived from the
/// run seed, the example id and the field name. A field whose tokens come
/// out unchanged keeps its original text, so ratio 0 is the identity.
pub fn shuffle_inputs(template: &Template, test: &Example, seed: u64, ratio: f64) -> Example {
    let mut out = test.clone();
    for field in template.input_fields() {
        let Some(text) = test.field(&field) else { continue };
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let shuffled = span_shuffle(&tokens, derive_seed(seed, &format!("noise/{}/{field}", test.id)), ratio);
        if shuffled != tokens {
            out = out.with_field(field, shuffled.join(" "));
        }
    }
    out
}

macro_rules! config_op {
    ($(#[$doc:meta])* $name:ident => $method:ident($($arg:ident: $ty:ty),*)) => {
        $(#[$doc])*
        pub fn $name(config: &RunConfig $(, $arg: $ty)*) -> Result<ExperimentReport> {
            Experiment::prepare(config.clone())?.$method($($arg),*)
        }
    };
}

config_op!(
    /// Evaluates the configured method once per seed.
    run_eval => run_eval());
config_op!(
    /// Shot-count ablation.
    run_ablation_shots => run_ablation_shots(shots: &[usize]));
config_op!(
    /// Candidate-pool-size ablation.
    run_ablation_candidates => run_ablation_candidates(candidates: &[usize]));
config_op!(
    /// Demonstration-order sensitivity over seeded permutations.
    run_order_sensitivity => run_order_sensitivity(count: usize));
config_op!(
    /// Original against span-shuffled test inputs.
    run_noise_experiment => run_noise_experiment());
config_op!(
    /// Per-method conditional entropy and accuracy.
    run_entropy_analysis => run_entropy_analysis(methods: &[Method]));
config_op!(
    /// Hypothesis files for a generation task.
    run_emit_mt => run_emit_mt());
