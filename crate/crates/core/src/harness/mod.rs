//! Seeded multi-run experiments: train every algorithm at every budget on
//! paired splits, evaluate on the held-out queries, and compare.

pub mod config;
mod eval;
mod io;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

pub use config::{Algorithm, AlgorithmConfig, EnvSpec, EvalConfig, EvalMode, ExperimentConfig, ScaleSpec};
pub use eval::{evaluate_acr, mean_sem, AcrEstimate};
pub use io::{
    policy_from_file, policy_to_file, read_results, write_results, write_stats, write_summary, DeploymentEntry,
    PolicyFile, SavedPolicy, RESULTS_HEADER, STATS_HEADER, SUMMARY_HEADER,
};

use crate::env::{split, EnvironmentModel, SplitView};
use crate::error::{Error, Result};
use crate::learner::{run_baseline, run_psst, run_psst_topk, ArmSpace, LearnOutcome};
use crate::rng::Stream;
use crate::stats::{pairwise_matrix, AlgorithmSample, Correction, PairedTest};

/// One (env, algorithm, budget, run) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub env: String,
    pub algorithm: String,
    pub budget: u64,
    /// Run index; runs with equal index share env, split and eval draws.
    pub seed: u64,
    pub acr: Option<f64>,
    pub consumed: u64,
    pub wall_time_s: f64,
    /// `"ok"` or `"error: <reason>"`.
    pub status: String,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Trains one learner.
pub fn train(
    alg: Algorithm,
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    rng: &Stream,
) -> Result<LearnOutcome> {
    match alg {
        Algorithm::Psst(opts) => run_psst(env, split, space, budget, opts, rng),
        Algorithm::PsstTopK { opts, k, rho } => run_psst_topk(env, split, space, budget, rho, k, opts, rng),
        Algorithm::Baseline(spec) => run_baseline(spec, env, split, space, budget, rng),
    }
}

/// Seed streams. The env/split stream ignores algorithm and budget so all
/// cells of a run are paired; evaluation draws ignore the algorithm so
/// comparisons use common random numbers.
pub struct Seeds {
    root: Stream,
}

impl Seeds {
    pub fn new(master_seed: u64) -> Self {
        Self {
            root: Stream::new(master_seed),
        }
    }

    pub fn env_generation(&self, env: &str, run: Option<u64>) -> u64 {
        let s = self.root.derive("env").derive(env);
        match run {
            Some(r) => s.derive_u64(r).id(),
            None => s.id(),
        }
    }

    pub fn split(&self, env: &str, run: u64) -> u64 {
        self.root.derive("split").derive(env).derive_u64(run).id()
    }

    pub fn learner(&self, env: &str, alg: &str, budget: u64, run: u64) -> Stream {
        self.root
            .derive("learn")
            .derive(env)
            .derive(alg)
            .derive_u64(budget)
            .derive_u64(run)
    }

    pub fn eval(&self, env: &str, budget: u64, run: u64) -> Stream {
        self.root.derive("eval").derive(env).derive_u64(budget).derive_u64(run)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub results: Vec<RunResult>,
    pub policies: Vec<SavedPolicy>,
}

enum Prepared {
    Shared(EnvironmentModel),
    Resampled,
}

/// Runs every (env, algorithm, budget, run) cell. Failures become error rows.
/// Output order is (env, algorithm, budget, run) in config order.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, jobs: Option<usize>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let seeds = Seeds::new(cfg.master_seed);
    let algorithms: Vec<Algorithm> = cfg.algorithms.iter().map(AlgorithmConfig::algorithm).collect::<Result<_>>()?;
    let mut prepared = Vec::with_capacity(cfg.envs.len());
    for spec in &cfg.envs {
        if spec.resample {
            prepared.push(Prepared::Resampled);
        } else {
            let seed = spec.seed.unwrap_or_else(|| seeds.env_generation(&spec.name, None));
            prepared.push(Prepared::Shared(spec.build(base_dir, seed)?));
        }
    }
    let units: Vec<(usize, u64)> = (0..cfg.envs.len())
        .flat_map(|e| (0..cfg.num_runs).map(move |r| (e, r)))
        .collect();
    let work = |&(e, run): &(usize, u64)| run_unit(cfg, base_dir, &seeds, &algorithms, &prepared[e], e, run);
    let threads = jobs.or(cfg.jobs).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_unit: Vec<Vec<(usize, usize, usize, RunResult, Option<SavedPolicy>)>> =
        pool.install(|| units.par_iter().map(work).collect());
    let mut rows: Vec<_> = per_unit.into_iter().flatten().collect();
    rows.sort_by_key(|(e, a, b, r, _)| (*e, *a, *b, r.seed));
    let mut out = ExperimentOutput::default();
    for (_, _, _, r, p) in rows {
        out.results.push(r);
        out.policies.extend(p);
    }
    Ok(out)
}

fn run_unit(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    seeds: &Seeds,
    algorithms: &[Algorithm],
    prepared: &Prepared,
    env_idx: usize,
    run: u64,
) -> Vec<(usize, usize, usize, RunResult, Option<SavedPolicy>)> {
    let spec = &cfg.envs[env_idx];
    let resampled;
    let env = match prepared {
        Prepared::Shared(env) => Ok(env),
        Prepared::Resampled => {
            resampled = spec.build(base_dir, seeds.env_generation(&spec.name, Some(run)));
            resampled.as_ref().map_err(ToString::to_string)
        }
    };
    let setup = env.and_then(|env| {
        let prepare = || -> Result<(SplitView, ArmSpace)> {
            Ok((split(env, seeds.split(&spec.name, run))?, spec.scales.resolve(env)?))
        };
        prepare().map(|(s, space)| (env, s, space)).map_err(|e| e.to_string())
    });
    let mut out = Vec::new();
    for (a, (alg_cfg, &alg)) in cfg.algorithms.iter().zip(algorithms).enumerate() {
        for (b, &budget) in cfg.budgets.iter().enumerate() {
            let mut row = RunResult {
                env: spec.name.clone(),
                algorithm: alg_cfg.id.clone(),
                budget,
                seed: run,
                acr: None,
                consumed: 0,
                wall_time_s: 0.0,
                status: "ok".into(),
            };
            let mut saved = None;
            let started = Instant::now();
            let outcome = match &setup {
                Err(msg) => Err(msg.clone()),
                Ok((env, s, space)) => {
                    let cell = || -> Result<_> {
                        let learner = seeds.learner(&spec.name, &alg_cfg.id, budget, run);
                        let learned = train(alg, env, s, space, budget, &learner)?;
                        let eval_rng = seeds.eval(&spec.name, budget, run);
                        let acr =
                            evaluate_acr(&learned.policy, env, s, cfg.eval.mode, cfg.eval.num_samples, &eval_rng)?;
                        Ok((learned, acr, *env))
                    };
                    cell().map_err(|e| e.to_string())
                }
            };
            match outcome {
                Ok((learned, acr, env)) => {
                    row.acr = Some(acr.mean);
                    row.consumed = learned.ledger.consumed;
                    if cfg.output.save_policies {
                        saved = Some(SavedPolicy {
                            env: spec.name.clone(),
                            algorithm: alg_cfg.id.clone(),
                            budget,
                            seed: run,
                            policy: policy_to_file(&learned.policy, env),
                        });
                    }
                }
                Err(e) => {
                    log::warn!("{} / {} / T={budget} / run {run}: {e}", spec.name, alg_cfg.id);
                    row.status = format!("error: {e}");
                }
            }
            if cfg.output.timing {
                row.wall_time_s = started.elapsed().as_secs_f64();
            }
            out.push((env_idx, a, b, row, saved));
        }
    }
    out
}

/// Mean ACR and SEM across successful runs of each (env, algorithm, budget).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub env: String,
    pub algorithm: String,
    pub budget: u64,
    pub n: usize,
    pub mean_acr: f64,
    pub sem: f64,
}

/// Groups in first-appearance order.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, u64)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in results {
        let key = (r.env.clone(), r.algorithm.clone(), r.budget);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                values.push(Vec::new());
                keys.len() - 1
            }
        };
        if let (true, Some(a)) = (r.is_ok(), r.acr) {
            values[idx].push(a);
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((env, algorithm, budget), v)| {
            let (mean_acr, sem) = if v.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let est = mean_sem(&v);
                (est.mean, est.sem)
            };
            SummaryRow {
                env,
                algorithm,
                budget,
                n: v.len(),
                mean_acr,
                sem,
            }
        })
        .collect()
}

/// One unordered pair within an (env, budget) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub env: String,
    pub budget: u64,
    pub alg_a: String,
    pub alg_b: String,
    pub test: PairedTest,
    pub p_raw: Option<f64>,
    pub p_adj: Option<f64>,
    pub median_diff: f64,
    /// `None` marks a skipped pair.
    pub outcome: Option<i8>,
}

/// Pairwise comparisons per (env, budget) grid; error rows are dropped.
pub fn compare(results: &[RunResult], alpha: f64, test: PairedTest, correction: Correction) -> Result<Vec<StatsRow>> {
    let dropped = results.iter().filter(|r| !r.is_ok() || r.acr.is_none()).count();
    if dropped > 0 {
        log::warn!("dropping {dropped} error rows before comparison");
    }
    let mut grids: Vec<((String, u64), Vec<AlgorithmSample>)> = Vec::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        let Some(acr) = r.acr else { continue };
        let key = (r.env.clone(), r.budget);
        let gi = match grids.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                grids.push((key, Vec::new()));
                grids.len() - 1
            }
        };
        let samples = &mut grids[gi].1;
        match samples.iter_mut().find(|s| s.algorithm == r.algorithm) {
            Some(s) => s.runs.push((r.seed, acr)),
            None => samples.push(AlgorithmSample {
                algorithm: r.algorithm.clone(),
                runs: vec![(r.seed, acr)],
            }),
        }
    }
    let mut rows = Vec::new();
    for ((env, budget), samples) in grids {
        if samples.len() < 2 {
            log::warn!("{env} T={budget}: fewer than two algorithms, nothing to compare");
            continue;
        }
        let outcome = pairwise_matrix(&samples, alpha, test, correction)?;
        for p in outcome.pairs {
            rows.push(StatsRow {
                env: env.clone(),
                budget,
                alg_a: p.alg_a,
                alg_b: p.alg_b,
                test,
                p_raw: p.p_raw,
                p_adj: p.p_adj,
                median_diff: p.median_diff,
                outcome: p.outcome,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(runs: u64) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"
master_seed = 11
num_runs = {runs}
budgets = [400, 900]

[[envs]]
name = "sb"
kind = "bernoulli"
scales = "pow2"
params = {{ num_prompts = 4, num_queries = 26, n_max = 8 }}

[[envs]]
name = "sb-resampled"
kind = "bernoulli"
resample = true
scales = [1, 2]
params = {{ num_prompts = 3, num_queries = 13, n_max = 2 }}

[[algorithms]]
id = "psst"
kind = "psst"

[[algorithms]]
id = "uniform"
kind = "uniform"

[eval]
num_samples = 200
"#
        ))
        .unwrap()
    }

    #[test]
    fn row_count_order_and_determinism() {
        let c = cfg(3);
        let a = run_experiment(&c, Path::new("."), Some(3)).unwrap();
        assert_eq!(a.results.len(), 2 * 2 * 2 * 3);
        let b = run_experiment(&c, Path::new("."), Some(1)).unwrap();
        assert_eq!(a.results, b.results);
        let keys: Vec<_> = a
            .results
            .iter()
            .map(|r| (r.env.clone(), r.algorithm.clone(), r.budget, r.seed))
            .collect();
        assert_eq!(keys[0], ("sb".into(), "psst".into(), 400, 0));
        assert_eq!(keys[3], ("sb".into(), "psst".into(), 900, 0));
        assert_eq!(keys[6], ("sb".into(), "uniform".into(), 400, 0));
        for r in &a.results {
            assert!(r.consumed <= r.budget);
        }
    }

    #[test]
    fn infeasible_cells_become_error_rows() {
        let mut c = cfg(2);
        c.budgets = vec![10];
        let out = run_experiment(&c, Path::new("."), None).unwrap();
        assert!(out.results.iter().any(|r| r.status.starts_with("error: ")));
        assert!(out.results.iter().all(|r| r.is_ok() == r.acr.is_some()));
    }

    #[test]
    fn summary_sem_is_sd_over_sqrt_n() {
        let rows: Vec<RunResult> = [1.0, 2.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| RunResult {
                env: "e".into(),
                algorithm: "a".into(),
                budget: 5,
                seed: i as u64,
                acr: Some(a),
                consumed: 5,
                wall_time_s: 0.0,
                status: "ok".into(),
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        let sd = (((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 2.0).sqrt();
        assert!((s[0].sem - sd / 3f64.sqrt()).abs() < 1e-12);
    }
}
