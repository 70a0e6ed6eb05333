use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use iapo::env::synth::{gen_bernoulli_env, gen_categorical_env, BernoulliParams, CategoricalParams};
use iapo::env::{load_env, save_env, split, SplitView};
use iapo::harness::{
    compare, evaluate_acr, policy_from_file, read_results, run_experiment, summarize, write_results,
    write_stats, write_summary, EvalMode, ExperimentConfig, PolicyFile, SavedPolicy, Seeds,
};
use iapo::harness::config::{base_dir, StatsConfig};
use iapo::stats::{Correction, PairedTest};
use iapo::{EnvironmentModel, Stream};
use iapo_ingest::{
    build_env_from_log, collect_completions, read_log, write_log, AnswerExtractor, EndpointConfig, LogEnvMode,
    LogEnvParams, PromptTemplate, QueryText,
};
use serde::Deserialize;

mod grid;

#[derive(Parser)]
#[command(name = "iapo", version, about = "Inference-aware prompt optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic environment or build one from a completion log.
    GenEnv(GenEnvArgs),
    /// Run every (env, algorithm, budget, run) cell of an experiment config.
    Run(RunArgs),
    /// Evaluate saved policies or emit the expected-utility oracle grid.
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
    /// Pairwise significance tests over a results file.
    Stats(StatsArgs),
    /// Collect completions from a chat-completions endpoint into a log.
    Collect(CollectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKindArg {
    Bernoulli,
    Categorical,
    FromLog,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogModeArg {
    MvTopk,
    BonBinned,
}

#[derive(Args)]
struct GenEnvArgs {
    #[arg(long, value_enum)]
    kind: EnvKindArg,
    /// Generator seed (ignored for from-log).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_prompts: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    n_max: Option<u32>,
    /// Completion log (JSON lines) for --kind from-log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mv-topk")]
    mode: LogModeArg,
    /// Answers kept per query in mv-topk mode.
    #[arg(long, default_value_t = 4)]
    top_k: usize,
    /// JSON object mapping query id to gold answer (mv-topk mode).
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Environment name for from-log.
    #[arg(long, default_value = "from-log")]
    name: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the config value or all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides `output.dir` in the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Sampled,
    Exact,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::Sampled => EvalMode::Sampled,
            EvalModeArg::Exact => EvalMode::Exact,
        }
    }
}

#[derive(Subcommand)]
enum EvaluateCommand {
    /// ACR of a policy file or of every line of a policies.jsonl file.
    Policy(PolicyArgs),
    /// Expected-utility grid from the exact oracles (MV and BoN panels).
    Grid(GridArgs),
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, value_enum, default_value = "sampled")]
    mode: EvalModeArg,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on the test side of this split instead of every query.
    #[arg(long, conflicts_with = "master_seed")]
    split_seed: Option<u64>,
    /// Reproduce the harness: split and evaluation draws derive from this
    /// master seed and each saved policy's env, T and run.
    #[arg(long)]
    master_seed: Option<u64>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    out: PathBuf,
    /// Largest N in the grid.
    #[arg(long, default_value_t = 32)]
    n_max: u32,
    /// Number of random Best-of-N score distributions.
    #[arg(long, default_value_t = 5)]
    bon_rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Wilcoxon,
    Sign,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorrectionArg {
    Holm,
    Bh,
    None,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    results: PathBuf,
    /// Experiment config supplying test, correction and alpha defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    test: Option<TestArg>,
    #[arg(long, value_enum)]
    correction: Option<CorrectionArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    /// TOML file with `endpoint`, `prompts`, `queries`, `samples` and
    /// optional `answer_pattern`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectConfig {
    endpoint: EndpointConfig,
    samples: usize,
    #[serde(default)]
    answer_pattern: Option<String>,
    prompts: Vec<PromptTemplate>,
    queries: Vec<QueryText>,
}

/// Usage and config problems exit 2, everything else 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait OrFail<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    let result = match cli.command {
        Command::GenEnv(a) => gen_env(a),
        Command::Run(a) => run(a),
        Command::Evaluate(EvaluateCommand::Policy(a)) => evaluate_policy(a),
        Command::Evaluate(EvaluateCommand::Grid(a)) => grid::write_grid(&a.out, a.n_max, a.bon_rows, a.seed).runtime(),
        Command::Stats(a) => stats(a),
        Command::Collect(a) => collect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Clap omits the usage line for invalid values; add it for the subcommand used.
fn usage_error(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if !e.use_stderr() {
        return ExitCode::SUCCESS;
    }
    let mut cmd = Cli::command();
    cmd.build();
    for arg in std::env::args().skip(1).take_while(|a| !a.starts_with('-')) {
        match cmd.find_subcommand(&arg) {
            Some(sub) => cmd = sub.clone(),
            None => break,
        }
    }
    if !e.to_string().contains("Usage:") {
        eprintln!("\n{}", cmd.render_usage());
    }
    ExitCode::from(2)
}

fn gen_env(a: GenEnvArgs) -> Result<(), Failure> {
    let env = match a.kind {
        EnvKindArg::Bernoulli => {
            let mut p = BernoulliParams::default();
            p.num_prompts = a.num_prompts.unwrap_or(p.num_prompts);
            p.num_queries = a.num_queries.unwrap_or(p.num_queries);
            p.n_max = a.n_max.unwrap_or(p.n_max);
            gen_bernoulli_env(a.seed, &p).usage()?
        }
        EnvKindArg::Categorical => {
            let mut p = CategoricalParams::default();
            p.num_prompts = a.num_prompts.unwrap_or(p.num_prompts);
            p.num_queries = a.num_queries.unwrap_or(p.num_queries);
            p.n_max = a.n_max.unwrap_or(p.n_max);
            gen_categorical_env(a.seed, &p).usage()?
        }
        EnvKindArg::FromLog => {
            let log = a.log.as_ref().ok_or_else(|| Failure::Usage(anyhow!("--kind from-log needs --log")))?;
            let records = read_log(BufReader::new(
                File::open(log).with_context(|| format!("reading {}", log.display())).usage()?,
            ))
            .with_context(|| log.display().to_string())
            .usage()?;
            let gold = match &a.gold {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).usage()?;
                    serde_json::from_str(&text).with_context(|| path.display().to_string()).usage()?
                }
                None => Default::default(),
            };
            let mode = match a.mode {
                LogModeArg::MvTopk => LogEnvMode::MvTopK,
                LogModeArg::BonBinned => LogEnvMode::BonBinned,
            };
            let params = LogEnvParams {
                name: a.name.clone(),
                top_k: a.top_k,
                n_max: a.n_max.unwrap_or(LogEnvParams::default().n_max),
                gold,
            };
            build_env_from_log(&records, mode, &params).usage()?
        }
    };
    save_env(&env, &a.out).with_context(|| format!("writing {}", a.out.display())).runtime()?;
    println!("{}", env.summary());
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(&a.config)
        .with_context(|| a.config.display().to_string())
        .usage()?;
    let base = base_dir(&a.config);
    let out_dir = a.out_dir.unwrap_or_else(|| base.join(&cfg.output.dir));
    let out = run_experiment(&cfg, &base, a.jobs).usage()?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display())).runtime()?;
    write_results(create(&out_dir.join("results.csv"))?, &out.results).runtime()?;
    write_summary(create(&out_dir.join("summary.csv"))?, &summarize(&out.results)).runtime()?;
    if cfg.output.save_policies {
        let mut w = create(&out_dir.join("policies.jsonl"))?;
        for p in &out.policies {
            serde_json::to_writer(&mut w, p).runtime()?;
            w.write_all(b"\n").runtime()?;
        }
        w.flush().runtime()?;
    }
    let failed = out.results.iter().filter(|r| !r.is_ok()).count();
    eprintln!(
        "{} runs, {failed} failed; results in {}",
        out.results.len(),
        out_dir.display()
    );
    if !out.results.is_empty() && failed == out.results.len() {
        return Err(Failure::Runtime(anyhow!("every run failed")));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .runtime()
}

struct PolicyJob {
    label: Option<SavedPolicy>,
    file: PolicyFile,
}

fn read_policies(path: &Path) -> anyhow::Result<Vec<PolicyJob>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(file) = serde_json::from_str::<PolicyFile>(&text) {
        return Ok(vec![PolicyJob { label: None, file }]);
    }
    let mut jobs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let saved: SavedPolicy =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        jobs.push(PolicyJob {
            file: saved.policy.clone(),
            label: Some(saved),
        });
    }
    if jobs.is_empty() {
        return Err(anyhow!("{}: no policies", path.display()));
    }
    Ok(jobs)
}

fn evaluate_policy(a: PolicyArgs) -> Result<(), Failure> {
    let env = load_env(&a.env).with_context(|| a.env.display().to_string()).usage()?;
    let jobs = read_policies(&a.policy).usage()?;
    let mut w = csv::Writer::from_writer(match &a.out {
        Some(path) => Box::new(create(path)?) as Box<dyn Write>,
        None => Box::new(std::io::stdout()),
    });
    w.write_record(["env", "algorithm", "T", "seed", "acr", "sem"]).runtime()?;
    for job in jobs {
        let policy = policy_from_file(&job.file, &env).usage()?;
        let (view, rng) = eval_setup(&a, &env, job.label.as_ref()).usage()?;
        let est = evaluate_acr(&policy, &env, &view, a.mode.into(), a.samples, &rng).runtime()?;
        let (alg, budget, seed) = match &job.label {
            Some(s) => (s.algorithm.clone(), s.budget.to_string(), s.seed.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            env.name().to_string(),
            alg,
            budget,
            seed,
            est.mean.to_string(),
            est.sem.to_string(),
        ])
        .runtime()?;
    }
    w.flush().runtime()?;
    Ok(())
}

fn eval_setup(a: &PolicyArgs, env: &EnvironmentModel, label: Option<&SavedPolicy>) -> anyhow::Result<(SplitView, Stream)> {
    if let Some(master) = a.master_seed {
        let saved = label.ok_or_else(|| anyhow!("--master-seed needs a policies.jsonl input"))?;
        let seeds = Seeds::new(master);
        let view = split(env, seeds.split(&saved.env, saved.seed))?;
        return Ok((view, seeds.eval(&saved.env, saved.budget, saved.seed)));
    }
    let view = match a.split_seed {
        Some(s) => split(env, s)?,
        None => SplitView::whole(env),
    };
    Ok((view, Stream::new(a.seed)))
}

fn stats(a: StatsArgs) -> Result<(), Failure> {
    let mut cfg = StatsConfig::default();
    if let Some(path) = &a.config {
        cfg = ExperimentConfig::load(path).with_context(|| path.display().to_string()).usage()?.stats;
    }
    let alpha = a.alpha.unwrap_or(cfg.alpha);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Failure::Usage(anyhow!("alpha must lie in (0, 1), got {alpha}")));
    }
    let test = match a.test {
        Some(TestArg::Wilcoxon) => PairedTest::Wilcoxon,
        Some(TestArg::Sign) => PairedTest::Sign,
        None => cfg.test,
    };
    let correction = match a.correction {
        Some(CorrectionArg::Holm) => Correction::Holm,
        Some(CorrectionArg::Bh) => Correction::Bh,
        Some(CorrectionArg::None) => Correction::None,
        None => cfg.correction,
    };
    let file = File::open(&a.results)
        .with_context(|| format!("reading {}", a.results.display()))
        .usage()?;
    let results = read_results(BufReader::new(file))
        .with_context(|| a.results.display().to_string())
        .usage()?;
    let rows = compare(&results, alpha, test, correction).runtime()?;
    write_stats(create(&a.out)?, &rows).runtime()?;
    Ok(())
}

fn collect(a: CollectArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))
        .usage()?;
    let cfg: CollectConfig = toml::from_str(&text)
        .with_context(|| a.config.display().to_string())
        .usage()?;
    let extractor = cfg.answer_pattern.as_deref().map(AnswerExtractor::new).transpose().usage()?;
    let mut records =
        collect_completions(&cfg.endpoint, &cfg.prompts, &cfg.queries, cfg.samples, &Stream::new(a.seed)).usage()?;
    if let Some(x) = extractor {
        x.apply(&mut records);
    }
    write_log(create(&a.out)?, &records).runtime()?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    eprintln!("{} completions, {failed} failed", records.len());
    if !records.is_empty() && failed == records.len() {
        return Err(Failure::Runtime(anyhow!("every request failed")));
    }
    Ok(())
}
