use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cone_core::harness::{Experiment, ExperimentReport, RunConfig};
use cone_core::synthetic::{synthetic_task, write_task, SyntheticConfig};

/// Demonstration selection experiments: retrieval plus conditional-entropy
/// reranking, evaluated with label scoring.
#[derive(Parser)]
#[command(name = "cone", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the configured method once per seed.
    Eval(RunArgs),
    /// One sub-report per shot count in --shot-list.
    AblateShots(RunArgs),
    /// One sub-report per candidate pool size in --candidate-list.
    AblateCandidates(RunArgs),
    /// Accuracy over seeded orderings of fixed demonstrations.
    OrderSensitivity(RunArgs),
    /// Original against span-shuffled test inputs.
    Noise(RunArgs),
    /// Mean conditional entropy and accuracy for each of --methods.
    EntropyAnalysis(RunArgs),
    /// Write source, hypothesis and reference files for a generation task.
    EmitMt(RunArgs),
    /// Write the two-domain synthetic task and a run config.
    Synth(SynthArgs),
}

/// Run options. Every flag overrides the config key of the same name.
#[derive(Args, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<String>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<String>,
    /// Labeled demonstration pool (line-delimited records).
    #[arg(long)]
    pool: Option<String>,
    /// Test split; `--dataset` is an alias.
    #[arg(long, alias = "dataset")]
    test: Option<String>,
    /// Built-in template id or template file.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    separator: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    retriever: Option<String>,
    /// Candidate pool size K.
    #[arg(long)]
    candidates: Option<String>,
    /// Shot count N.
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    cone_mode: Option<String>,
    #[arg(long)]
    order: Option<String>,
    /// `ngram` or `remote`.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    log_base: Option<String>,
    #[arg(long)]
    cache_dir: Option<String>,
    #[arg(long)]
    bm25_k1: Option<String>,
    #[arg(long)]
    bm25_b: Option<String>,
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long)]
    ngram_order: Option<String>,
    #[arg(long)]
    ngram_k: Option<String>,
    #[arg(long)]
    ngram_cache_weight: Option<String>,
    #[arg(long)]
    ngram_corpus: Option<String>,
    #[arg(long)]
    max_prompt_chars: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<String>,
    #[arg(long)]
    stop: Option<String>,
    /// `on` or `off`.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    noise_ratio: Option<String>,
    #[arg(long)]
    permutations: Option<String>,
    #[arg(long)]
    shot_list: Option<String>,
    #[arg(long)]
    candidate_list: Option<String>,
    #[arg(long)]
    methods: Option<String>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let flags = [
            ("seeds", &self.seed),
            ("jobs", &self.jobs),
            ("out", &self.out),
            ("pool", &self.pool),
            ("test", &self.test),
            ("template", &self.template),
            ("separator", &self.separator),
            ("method", &self.method),
            ("retriever", &self.retriever),
            ("candidates", &self.candidates),
            ("shots", &self.shots),
            ("cone-mode", &self.cone_mode),
            ("order", &self.order),
            ("scorer", &self.scorer),
            ("endpoint", &self.endpoint),
            ("model", &self.model),
            ("log-base", &self.log_base),
            ("cache-dir", &self.cache_dir),
            ("bm25-k1", &self.bm25_k1),
            ("bm25-b", &self.bm25_b),
            ("embeddings", &self.embeddings),
            ("ngram-order", &self.ngram_order),
            ("ngram-k", &self.ngram_k),
            ("ngram-cache-weight", &self.ngram_cache_weight),
            ("ngram-corpus", &self.ngram_corpus),
            ("max-prompt-chars", &self.max_prompt_chars),
            ("max-new-tokens", &self.max_new_tokens),
            ("stop", &self.stop),
            ("noise", &self.noise),
            ("noise-ratio", &self.noise_ratio),
            ("permutations", &self.permutations),
            ("shot-list", &self.shot_list),
            ("candidate-list", &self.candidate_list),
            ("methods", &self.methods),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v).with_context(|| format!("--{key}"))?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?}: expected key=value"))?;
            config.set(k.trim(), v.trim())?;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write into.
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    /// Add a decoy per test input that is its nearest neighbour.
    #[arg(long)]
    adversarial: bool,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticConfig::default().pool_per_domain)]
    pool_per_domain: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().test_per_domain)]
    test_per_domain: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().cache_weight)]
    cache_weight: f64,
}

fn run(command: Command) -> Result<ExitCode> {
    let (args, op): (RunArgs, fn(&Experiment) -> cone_core::Result<ExperimentReport>) = match command {
        Command::Synth(s) => {
            let task = synthetic_task(&SyntheticConfig {
                pool_per_domain: s.pool_per_domain,
                test_per_domain: s.test_per_domain,
                adversarial: s.adversarial,
                seed: s.seed,
                cache_weight: s.cache_weight,
            });
            let files = write_task(&task, &s.out)?;
            println!("{}", files.config.display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Eval(a) => (a, Experiment::run_eval),
        Command::AblateShots(a) => (a, |x| x.run_ablation_shots(&x.config().shot_list)),
        Command::AblateCandidates(a) => (a, |x| x.run_ablation_candidates(&x.config().candidate_list)),
        Command::OrderSensitivity(a) => (a, |x| x.run_order_sensitivity(x.config().permutations)),
        Command::Noise(a) => (a, Experiment::run_noise_experiment),
        Command::EntropyAnalysis(a) => (a, |x| x.run_entropy_analysis(&x.config().methods)),
        Command::EmitMt(a) => (a, Experiment::run_emit_mt),
    };
    let config = args.resolve()?;
    let out = config.out.clone();
    let experiment = Experiment::prepare(config)?;
    let report = op(&experiment)?;
    let path = report.write(&out)?;
    for e in &report.entries {
        println!(
            "{:<16} mean {:.4}  variance {:.6}  runs {}",
            e.label,
            e.mean,
            e.variance,
            e.runs.len()
        );
    }
    if let Some(n) = &report.noise {
        println!("noise ratio {}  delta {:.4}", n.ratio, n.delta);
    }
    for row in report.entropy.iter().flatten() {
        println!(
            "{:<16} H(x|c) mean {:.4}  std {:.4}  accuracy {:.4}",
            row.method.as_str(),
            row.entropy.mean,
            row.entropy.std,
            row.accuracy_mean
        );
    }
    println!("report: {}", path.display());
    if report.complete {
        Ok(ExitCode::SUCCESS)
    } else {
        for e in &report.errors {
            eprintln!("{} seed {}: {}", e.entry, e.seed, e.message);
        }
        eprintln!("partial report: {} run(s) failed", report.errors.len());
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
