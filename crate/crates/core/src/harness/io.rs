//! CSV results, summaries and comparison tables; JSON policy files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{RunResult, StatsRow, SummaryRow};
use crate::env::EnvironmentModel;
use crate::error::{Error, Result};
use crate::learner::{Deployment, Policy};

pub const RESULTS_HEADER: [&str; 8] = ["env", "algorithm", "T", "seed", "acr", "consumed", "wall_time_s", "status"];
pub const SUMMARY_HEADER: [&str; 6] = ["env", "algorithm", "T", "n", "mean_acr", "sem"];
pub const STATS_HEADER: [&str; 9] = [
    "env",
    "T",
    "alg_a",
    "alg_b",
    "test",
    "p_raw",
    "p_adj",
    "median_diff",
    "outcome",
];

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_results<W: Write>(w: W, rows: &[RunResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULTS_HEADER)?;
    for r in rows {
        out.write_record([
            r.env.clone(),
            r.algorithm.clone(),
            r.budget.to_string(),
            r.seed.to_string(),
            opt(r.acr),
            r.consumed.to_string(),
            num(r.wall_time_s),
            r.status.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a results file; errors name the offending line.
pub fn read_results<R: Read>(r: R) -> Result<Vec<RunResult>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Parse {
            path: "line 1".into(),
            message: format!("expected header {}", RESULTS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = |field: &str, message: String| Error::Parse {
            path: format!("line {line}, column {field}"),
            message,
        };
        let rec = rec.map_err(|e| bad("?", e.to_string()))?;
        let int = |idx: usize, field: &str| -> Result<u64> {
            rec[idx].parse().map_err(|e| bad(field, format!("{:?}: {e}", &rec[idx])))
        };
        let acr = match &rec[4] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| bad("acr", format!("{s:?}: {e}")))?),
        };
        let wall = match &rec[6] {
            "" => 0.0,
            s => s.parse::<f64>().map_err(|e| bad("wall_time_s", format!("{s:?}: {e}")))?,
        };
        let status = rec[7].to_string();
        if status == "ok" && acr.is_none() {
            return Err(bad("acr", "missing value on an ok row".into()));
        }
        rows.push(RunResult {
            env: rec[0].to_string(),
            algorithm: rec[1].to_string(),
            budget: int(2, "T")?,
            seed: int(3, "seed")?,
            acr,
            consumed: int(5, "consumed")?,
            wall_time_s: wall,
            status,
        });
    }
    Ok(rows)
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for r in rows {
        out.write_record([
            r.env.clone(),
            r.algorithm.clone(),
            r.budget.to_string(),
            r.n.to_string(),
            num(r.mean_acr),
            num(r.sem),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_stats<W: Write>(w: W, rows: &[StatsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(STATS_HEADER)?;
    for r in rows {
        let outcome = match r.outcome {
            Some(o) => format!("{o:+}").replace("+0", "0"),
            None => "skipped".into(),
        };
        out.write_record([
            r.env.clone(),
            r.budget.to_string(),
            r.alg_a.clone(),
            r.alg_b.clone(),
            r.test.as_str().to_string(),
            opt(r.p_raw),
            opt(r.p_adj),
            num(r.median_diff),
            outcome,
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A policy keyed by context and prompt ids. `scale = None` deploys a scale
/// drawn uniformly from `scales` on every query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub env: String,
    pub scales: Vec<u32>,
    pub deployments: Vec<DeploymentEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentEntry {
    pub context: String,
    pub prompt: String,
    #[serde(default)]
    pub scale: Option<u32>,
}

/// One learned policy as written to the policies JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedPolicy {
    pub env: String,
    pub algorithm: String,
    #[serde(rename = "T")]
    pub budget: u64,
    pub seed: u64,
    pub policy: PolicyFile,
}

pub fn policy_to_file(policy: &Policy, env: &EnvironmentModel) -> PolicyFile {
    let deployments = policy
        .deployments
        .iter()
        .zip(env.contexts())
        .map(|(d, ctx)| DeploymentEntry {
            context: ctx.id.clone(),
            prompt: env.prompts()[d.prompt()].id.clone(),
            scale: match *d {
                Deployment::Fixed { scale, .. } => Some(scale),
                Deployment::RandomScale { .. } => None,
            },
        })
        .collect();
    PolicyFile {
        env: env.name().to_string(),
        scales: policy.scales.clone(),
        deployments,
    }
}

/// Resolves ids against `env`; every context must be covered exactly once.
pub fn policy_from_file(file: &PolicyFile, env: &EnvironmentModel) -> Result<Policy> {
    let mut deployments: Vec<Option<Deployment>> = vec![None; env.num_contexts()];
    for (i, d) in file.deployments.iter().enumerate() {
        let c = env
            .contexts()
            .iter()
            .position(|ctx| ctx.id == d.context)
            .ok_or_else(|| Error::Validation(format!("deployments[{i}]: unknown context {:?}", d.context)))?;
        let prompt = env
            .prompts()
            .iter()
            .position(|p| p.id == d.prompt)
            .ok_or_else(|| Error::Validation(format!("deployments[{i}]: unknown prompt {:?}", d.prompt)))?;
        let dep = match d.scale {
            Some(scale) if scale >= 1 && scale <= env.n_max() => Deployment::Fixed { prompt, scale },
            Some(scale) => {
                return Err(Error::Validation(format!(
                    "deployments[{i}]: scale {scale} outside 1..={}",
                    env.n_max()
                )))
            }
            None => Deployment::RandomScale { prompt },
        };
        if deployments[c].replace(dep).is_some() {
            return Err(Error::Validation(format!("context {:?} listed twice", d.context)));
        }
    }
    if file.scales.is_empty() || file.scales.iter().any(|&s| s == 0 || s > env.n_max()) {
        return Err(Error::Validation("policy scales must lie in 1..=n_max".into()));
    }
    let deployments = deployments
        .into_iter()
        .zip(env.contexts())
        .map(|(d, ctx)| d.ok_or_else(|| Error::Validation(format!("no deployment for context {:?}", ctx.id))))
        .collect::<Result<_>>()?;
    Ok(Policy {
        deployments,
        scales: file.scales.clone(),
    })
}
