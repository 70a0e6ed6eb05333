//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::synth::{gen_bernoulli_env, gen_categorical_env, BernoulliParams, CategoricalParams};
use crate::env::{load_env, EnvironmentModel};
use crate::error::{Error, Result};
use crate::learner::baselines::{DEFAULT_EPSILON, DEFAULT_TEMPERATURE, DEFAULT_UCB_C};
use crate::learner::{ArmSpace, BaselineSpec, PsstOptions};
use crate::stats::{Correction, PairedTest};

pub const DEFAULT_NUM_SAMPLES: usize = 10_000;
pub const DEFAULT_TOPK_K: usize = 4;
pub const DEFAULT_TOPK_RHO: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default = "one")]
    pub num_runs: u64,
    pub budgets: Vec<u64>,
    /// Worker threads; defaults to the available cores.
    #[serde(default)]
    pub jobs: Option<usize>,
    pub envs: Vec<EnvSpec>,
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Bernoulli,
    Categorical,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleSpec {
    /// `"full"` or `"pow2"`.
    Named(String),
    List(Vec<u32>),
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec::Named("full".into())
    }
}

impl ScaleSpec {
    pub fn resolve(&self, env: &EnvironmentModel) -> Result<ArmSpace> {
        match self {
            ScaleSpec::Named(n) if n == "full" => Ok(ArmSpace::full(env)),
            ScaleSpec::Named(n) if n == "pow2" => Ok(ArmSpace::powers_of_two(env)),
            ScaleSpec::Named(n) => Err(Error::Config(format!("unknown scale set {n:?} (use full, pow2 or a list)"))),
            ScaleSpec::List(l) => ArmSpace::with_scales(env, l.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    /// Generator seed; derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Draw a fresh generated environment for every run.
    #[serde(default)]
    pub resample: bool,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub params: toml::Table,
    #[serde(default)]
    pub scales: ScaleSpec,
}

impl EnvSpec {
    /// Builds the environment; generator kinds use `seed`.
    pub fn build(&self, base_dir: &Path, seed: u64) -> Result<EnvironmentModel> {
        let params = toml::Value::Table(self.params.clone());
        let bad = |e: toml::de::Error| Error::Config(format!("env {}: params: {e}", self.name));
        match self.kind {
            EnvKind::Bernoulli => {
                let p: BernoulliParams = params.try_into().map_err(bad)?;
                gen_bernoulli_env(seed, &p)
            }
            EnvKind::Categorical => {
                let p: CategoricalParams = params.try_into().map_err(bad)?;
                gen_categorical_env(seed, &p)
            }
            EnvKind::File => {
                let path = self.resolved_path(base_dir)?;
                load_env(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            }
        }
    }

    pub fn resolved_path(&self, base_dir: &Path) -> Result<PathBuf> {
        let p = self
            .path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("env {}: kind = \"file\" needs a path", self.name)))?;
        Ok(if p.is_absolute() { p.clone() } else { base_dir.join(p) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Psst,
    PsstTopk,
    Uniform,
    EpsGreedy,
    Softmax,
    Ucb,
    TripleN1,
    TripleNrandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub id: String,
    pub kind: AlgorithmKind,
    #[serde(default)]
    pub stockpiling: Option<bool>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub ucb_c: Option<f64>,
}

/// A fully parameterized learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    Psst(PsstOptions),
    PsstTopK { opts: PsstOptions, k: usize, rho: f64 },
    Baseline(BaselineSpec),
}

impl AlgorithmConfig {
    pub fn algorithm(&self) -> Result<Algorithm> {
        let opts = PsstOptions {
            stockpiling: self.stockpiling.unwrap_or(true),
        };
        let alg = match self.kind {
            AlgorithmKind::Psst => Algorithm::Psst(opts),
            AlgorithmKind::PsstTopk => Algorithm::PsstTopK {
                opts,
                k: self.k.unwrap_or(DEFAULT_TOPK_K),
                rho: self.rho.unwrap_or(DEFAULT_TOPK_RHO),
            },
            AlgorithmKind::Uniform => Algorithm::Baseline(BaselineSpec::Uniform),
            AlgorithmKind::EpsGreedy => Algorithm::Baseline(BaselineSpec::EpsGreedy {
                epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            }),
            AlgorithmKind::Softmax => Algorithm::Baseline(BaselineSpec::Softmax {
                temperature: self.temperature.unwrap_or(DEFAULT_TEMPERATURE),
            }),
            AlgorithmKind::Ucb => Algorithm::Baseline(BaselineSpec::Ucb {
                c: self.ucb_c.unwrap_or(DEFAULT_UCB_C),
            }),
            AlgorithmKind::TripleN1 => Algorithm::Baseline(BaselineSpec::TripleN1),
            AlgorithmKind::TripleNrandom => Algorithm::Baseline(BaselineSpec::TripleNRandom),
        };
        match alg {
            Algorithm::Baseline(spec) => spec.validate()?,
            Algorithm::PsstTopK { k, rho, .. } => {
                if k == 0 || !(rho > 0.0 && rho < 1.0) {
                    return Err(Error::Config(format!("algorithm {}: need k >= 1 and 0 < rho < 1", self.id)));
                }
            }
            Algorithm::Psst(_) => {}
        }
        Ok(alg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Sampled,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
}

fn default_samples() -> usize {
    DEFAULT_NUM_SAMPLES
}

fn default_mode() -> EvalMode {
    EvalMode::Sampled
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_samples: DEFAULT_NUM_SAMPLES,
            mode: EvalMode::Sampled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default = "default_test")]
    pub test: PairedTest,
    #[serde(default = "default_correction")]
    pub correction: Correction,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_test() -> PairedTest {
    PairedTest::Wilcoxon
}

fn default_correction() -> Correction {
    Correction::Holm
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            test: PairedTest::Wilcoxon,
            correction: Correction::Holm,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Record wall-clock time per run. Off by default so reruns are
    /// byte-identical.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub save_policies: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("results")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            timing: false,
            save_policies: false,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative env paths resolve against the
    /// config file's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = base_dir(path);
        for env in &cfg.envs {
            if env.kind == EnvKind::File {
                let p = env.resolved_path(&base)?;
                if !p.is_file() {
                    return Err(Error::Config(format!("env file not found: {}", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be at least 1".into()));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::Config("budgets must be a non-empty list of positive integers".into()));
        }
        if self.envs.is_empty() || self.algorithms.is_empty() {
            return Err(Error::Config("need at least one env and one algorithm".into()));
        }
        if self.eval.num_samples == 0 {
            return Err(Error::Config("eval.num_samples must be positive".into()));
        }
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return Err(Error::Config("stats.alpha must lie in (0, 1)".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        unique(self.envs.iter().map(|e| e.name.as_str()), "env name")?;
        unique(self.algorithms.iter().map(|a| a.id.as_str()), "algorithm id")?;
        for env in &self.envs {
            if env.kind == EnvKind::File && env.path.is_none() {
                return Err(Error::Config(format!("env {}: kind = \"file\" needs a path", env.name)));
            }
            if env.kind == EnvKind::File && env.resample {
                return Err(Error::Config(format!("env {}: file environments cannot be resampled", env.name)));
            }
        }
        for a in &self.algorithms {
            a.algorithm().map_err(|e| match e {
                Error::Config(_) => e,
                other => Error::Config(format!("algorithm {}: {other}", a.id)),
            })?;
        }
        Ok(())
    }
}

pub fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn unique<'a>(names: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Config(format!("duplicate {what} {n:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
master_seed = 1
num_runs = 5
budgets = [2000]

[[envs]]
name = "sb"
kind = "bernoulli"
scales = "pow2"
params = { num_prompts = 4, num_queries = 26, n_max = 8 }

[[algorithms]]
id = "psst"
kind = "psst"

[[algorithms]]
id = "eps"
kind = "eps_greedy"
epsilon = 0.2
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.num_runs, 5);
        assert_eq!(cfg.eval, EvalConfig::default());
        assert_eq!(
            cfg.algorithms[1].algorithm().unwrap(),
            Algorithm::Baseline(BaselineSpec::EpsGreedy { epsilon: 0.2 })
        );
        let env = cfg.envs[0].build(Path::new("."), 3).unwrap();
        assert_eq!(env.num_prompts(), 4);
        assert_eq!(cfg.envs[0].scales.resolve(&env).unwrap().scales(), &[1, 2, 4, 8]);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            MINIMAL.replace("budgets = [2000]", "budgets = [0]"),
            MINIMAL.replace("num_runs = 5", "num_runs = 0"),
            MINIMAL.replace("epsilon = 0.2", "epsilon = 1.5"),
            MINIMAL.replace("id = \"eps\"", "id = \"psst\""),
            MINIMAL.replace("kind = \"psst\"", "kind = \"thompson\""),
            MINIMAL.replace("master_seed = 1", "master_seed = 1\nbogus = 3"),
        ];
        for text in bad {
            assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn missing_env_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("kind = \"bernoulli\"", "kind = \"file\"\npath = \"nowhere.env.json\"");
        let cfg_path = dir.path().join("cfg.toml");
        std::fs::write(&cfg_path, text).unwrap();
        let err = ExperimentConfig::load(&cfg_path).unwrap_err().to_string();
        assert!(err.contains("nowhere.env.json"), "{err}");
    }
}
