//! Empirical environments from scored completion logs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use iapo::aggregate::Context;
use iapo::env::synth::{bon_contexts, mv_contexts, BON_COST_WEIGHTS};
use iapo::env::{OutcomeDist, Prompt, QueryModel, Support};
use iapo::{AggregatorKind, EnvironmentModel};

use crate::record::LogRecord;
use crate::{IngestError, Result};

/// Label that absorbs every answer outside a query's top-k.
pub const OTHER_LABEL: &str = "OTHER";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogEnvMode {
    /// Majority vote over the `top_k` most frequent answers plus OTHER.
    MvTopK,
    /// Best-of-N over scores rounded to the 0.5 grid on `[-1, 1]`.
    BonBinned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEnvParams {
    pub name: String,
    pub top_k: usize,
    pub n_max: u32,
    /// Gold answer per query id (majority-vote mode only).
    pub gold: HashMap<String, String>,
}

impl Default for LogEnvParams {
    fn default() -> Self {
        Self {
            name: "from-log".into(),
            top_k: 4,
            n_max: 32,
            gold: HashMap::new(),
        }
    }
}

/// Nearest multiple of 0.5, halves rounded away from zero, clamped to `[-1, 1]`.
pub fn bin_score(s: f64) -> f64 {
    let b = ((s * 2.0).round() / 2.0).clamp(-1.0, 1.0);
    // Collapse -0.0 so identical bins compare and serialize identically.
    b + 0.0
}

/// Builds an empirical environment. Prompts and queries are ordered by id;
/// records whose status is not `ok` are ignored.
pub fn build_env_from_log(records: &[LogRecord], mode: LogEnvMode, params: &LogEnvParams) -> Result<EnvironmentModel> {
    if params.n_max == 0 {
        return Err(IngestError::Config("n_max must be positive".into()));
    }
    let ok: Vec<&LogRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let skipped = records.len() - ok.len();
    if skipped > 0 {
        log::warn!("ignoring {skipped} records with error status");
    }
    check_kinds(&ok, mode)?;

    let prompt_ids: Vec<&str> = ok.iter().map(|r| r.prompt_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let query_ids: Vec<&str> = ok.iter().map(|r| r.query_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if prompt_ids.is_empty() {
        return Err(IngestError::Records("no usable records".into()));
    }
    let mut cells: BTreeMap<(&str, &str), Vec<&LogRecord>> = BTreeMap::new();
    for r in &ok {
        cells.entry((r.query_id.as_str(), r.prompt_id.as_str())).or_default().push(r);
    }
    let gaps: Vec<String> = query_ids
        .iter()
        .flat_map(|q| prompt_ids.iter().map(move |p| (*q, *p)))
        .filter(|k| !cells.contains_key(k))
        .map(|(q, p)| format!("({p}, {q})"))
        .collect();
    if !gaps.is_empty() {
        let shown: Vec<&str> = gaps.iter().take(10).map(String::as_str).collect();
        return Err(IngestError::Coverage(format!(
            "{} missing pairs: {}{}",
            gaps.len(),
            shown.join(", "),
            if gaps.len() > shown.len() { ", ..." } else { "" }
        )));
    }

    let prompts = prompt_costs(&ok, &prompt_ids)?;
    let (aggregator, bounds, contexts, queries) = match mode {
        LogEnvMode::MvTopK => {
            let queries = query_ids
                .iter()
                .map(|&q| mv_query(q, &prompt_ids, &cells, params))
                .collect::<Result<Vec<_>>>()?;
            (AggregatorKind::Mv, vec![[0.0, 1.0]], mv_contexts(), queries)
        }
        LogEnvMode::BonBinned => {
            let dim = ok[0].scores.as_ref().map_or(0, Vec::len);
            let queries = query_ids
                .iter()
                .map(|&q| bon_query(q, &prompt_ids, &cells))
                .collect::<Vec<_>>();
            (AggregatorKind::Bon, vec![[-1.0, 1.0]; dim], default_bon_contexts(dim), queries)
        }
    };
    Ok(EnvironmentModel::new(
        params.name.clone(),
        aggregator,
        params.n_max,
        bounds,
        prompts,
        contexts,
        queries,
    )?)
}

fn check_kinds(records: &[&LogRecord], mode: LogEnvMode) -> Result<()> {
    let mut dim = None;
    for (i, r) in records.iter().enumerate() {
        let what = || format!("record {} ({}, {})", i + 1, r.prompt_id, r.query_id);
        match (&r.answer, &r.scores, mode) {
            (Some(_), None, LogEnvMode::MvTopK) => {}
            (None, Some(s), LogEnvMode::BonBinned) => {
                if s.is_empty() || s.iter().any(|v| !v.is_finite()) {
                    return Err(IngestError::Records(format!("{}: scores must be finite and non-empty", what())));
                }
                if *dim.get_or_insert(s.len()) != s.len() {
                    return Err(IngestError::Records(format!("{}: score vectors differ in length", what())));
                }
            }
            (Some(_), Some(_), _) => {
                return Err(IngestError::Records(format!("{}: has both an answer and scores", what())))
            }
            (None, None, _) => return Err(IngestError::Records(format!("{}: has neither answer nor scores", what()))),
            (Some(_), None, LogEnvMode::BonBinned) => {
                return Err(IngestError::Records(format!(
                    "{}: answer record in a score log (mixed record kinds)",
                    what()
                )))
            }
            (None, Some(_), LogEnvMode::MvTopK) => {
                return Err(IngestError::Records(format!(
                    "{}: score record in an answer log (mixed record kinds)",
                    what()
                )))
            }
        }
    }
    Ok(())
}

/// Mean token count per prompt divided by the largest mean.
fn prompt_costs(records: &[&LogRecord], prompt_ids: &[&str]) -> Result<Vec<Prompt>> {
    let mut sums: HashMap<&str, (u128, u64)> = HashMap::new();
    for r in records {
        let e = sums.entry(r.prompt_id.as_str()).or_default();
        e.0 += u128::from(r.tokens);
        e.1 += 1;
    }
    let means: Vec<f64> = prompt_ids
        .iter()
        .map(|p| {
            let (s, n) = sums[p];
            s as f64 / n as f64
        })
        .collect();
    let max = means.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(IngestError::Records("every prompt has zero mean token count".into()));
    }
    Ok(prompt_ids
        .iter()
        .zip(means)
        .map(|(p, m)| Prompt {
            id: (*p).to_string(),
            cost: m / max,
        })
        .collect())
}

fn frequencies(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn mv_query(
    query: &str,
    prompt_ids: &[&str],
    cells: &BTreeMap<(&str, &str), Vec<&LogRecord>>,
    params: &LogEnvParams,
) -> Result<QueryModel> {
    let gold = params
        .gold
        .get(query)
        .ok_or_else(|| IngestError::Config(format!("no gold answer for query {query}")))?;
    // Frequency of each answer across all prompts of this query.
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for p in prompt_ids {
        for r in &cells[&(query, *p)] {
            *totals.entry(r.answer.as_deref().expect("checked")).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let folds = ranked.len() > params.top_k;
    let mut labels: Vec<String> = ranked.iter().take(params.top_k).map(|(l, _)| (*l).to_string()).collect();
    if folds {
        labels.push(OTHER_LABEL.to_string());
    }
    let per_prompt = prompt_ids
        .iter()
        .map(|p| {
            let mut counts = vec![0u64; labels.len()];
            for r in &cells[&(query, *p)] {
                let a = r.answer.as_deref().expect("checked");
                let slot = labels[..labels.len() - usize::from(folds)]
                    .iter()
                    .position(|l| l == a)
                    .unwrap_or(labels.len() - 1);
                counts[slot] += 1;
            }
            OutcomeDist::new(Support::Labels(labels.clone()), frequencies(&counts))
        })
        .collect();
    Ok(QueryModel {
        id: query.to_string(),
        gold: Some(gold.clone()),
        per_prompt,
    })
}

fn bon_query(query: &str, prompt_ids: &[&str], cells: &BTreeMap<(&str, &str), Vec<&LogRecord>>) -> QueryModel {
    let per_prompt = prompt_ids
        .iter()
        .map(|p| {
            // Keyed by the bins' bit patterns; bins are finite and never -0.0.
            let mut counts: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
            for r in &cells[&(query, *p)] {
                let key = r
                    .scores
                    .as_ref()
                    .expect("checked")
                    .iter()
                    .map(|&s| (bin_score(s) * 2.0) as i64)
                    .collect();
                *counts.entry(key).or_default() += 1;
            }
            let rows: Vec<Vec<f64>> = counts
                .keys()
                .map(|k| k.iter().map(|&h| h as f64 / 2.0).collect())
                .collect();
            let c: Vec<u64> = counts.values().copied().collect();
            OutcomeDist::new(Support::vectors_from_rows(&rows), frequencies(&c))
        })
        .collect();
    QueryModel {
        id: query.to_string(),
        gold: None,
        per_prompt,
    }
}

/// The 27-context grid for two objectives; equal task weights otherwise.
fn default_bon_contexts(dim: usize) -> Vec<Context> {
    if dim == 2 {
        return bon_contexts();
    }
    BON_COST_WEIGHTS
        .iter()
        .map(|&(tier, cw)| Context::new(tier, vec![1.0 / dim as f64; dim], cw).expect("valid context"))
        .collect()
}
