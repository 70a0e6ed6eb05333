//! Paired nonparametric tests, multiplicity correction and win matrices.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Sample sizes up to this use the exact null distribution under `Auto`.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMode {
    Exact,
    Approx,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairedTest {
    Wilcoxon,
    Sign,
}

impl PairedTest {
    pub fn as_str(self) -> &'static str {
        match self {
            PairedTest::Wilcoxon => "wilcoxon",
            PairedTest::Sign => "sign",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    Holm,
    Bh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_two_sided: f64,
    pub n_effective: usize,
}

/// Paired differences with non-finite pairs and exact zeros removed.
fn effective_diffs(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| d.is_finite() && *d != 0.0)
        .collect())
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test. Returns `None` (skipped) when fewer
/// than two non-zero differences remain.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], mode: WilcoxonMode) -> Result<Option<TestResult>> {
    let d = effective_diffs(x, y)?;
    let n = d.len();
    if n < 2 {
        return Ok(None);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Approx => false,
        WilcoxonMode::Auto => n <= EXACT_WILCOXON_MAX_N,
    };
    let p = if exact {
        exact_lower_tail(&ranks, w) * 2.0
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = tie_sizes(&abs).iter().map(|&t| t * t * t - t).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        if var <= 0.0 {
            1.0
        } else {
            let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
            2.0 * Normal::standard().cdf(-z)
        }
    };
    Ok(Some(TestResult {
        statistic: w,
        p_two_sided: p.min(1.0),
        n_effective: n,
    }))
}

fn tie_sizes(sorted_or_not: &[f64]) -> Vec<f64> {
    let mut v = sorted_or_not.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        if j > i {
            out.push((j - i + 1) as f64);
        }
        i = j + 1;
    }
    out
}

/// `P(W+ <= w)` under the null where each rank's sign is a fair coin.
/// Counts sign assignments by dynamic programming over doubled ranks, which
/// are integers even with averaged ties.
fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    // Counts can reach 2^n; f64 keeps them exact for the sizes used here.
    let mut ways = vec![0.0f64; max + 1];
    ways[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if ways[s] != 0.0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    let limit = (w * 2.0).round() as usize;
    let hit: f64 = ways[..=limit.min(max)].iter().sum();
    hit / 2f64.powi(ranks.len() as i32)
}

/// Two-sided exact binomial test on the signs of non-zero differences.
pub fn sign_test(x: &[f64], y: &[f64]) -> Result<Option<TestResult>> {
    let d = effective_diffs(x, y)?;
    let n = d.len();
    if n < 2 {
        return Ok(None);
    }
    let pos = d.iter().filter(|v| **v > 0.0).count();
    let k = pos.min(n - pos);
    // P(X <= k) for X ~ Bin(n, 1/2), built from successive binomial coefficients.
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            coef = coef * (n - i + 1) as f64 / i as f64;
        }
        tail += coef;
    }
    let p = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
    Ok(Some(TestResult {
        statistic: k as f64,
        p_two_sided: p,
        n_effective: n,
    }))
}

/// Multiplicity adjustment; output order matches input order.
pub fn adjust_pvalues(p: &[f64], method: Correction) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    match method {
        Correction::None => out.copy_from_slice(p),
        Correction::Holm => {
            let mut running: f64 = 0.0;
            for (i, &k) in order.iter().enumerate() {
                running = running.max(((m - i) as f64 * p[k]).min(1.0));
                out[k] = running;
            }
        }
        Correction::Bh => {
            let mut running: f64 = 1.0;
            for (i, &k) in order.iter().enumerate().rev() {
                running = running.min((m as f64 / (i + 1) as f64 * p[k]).min(1.0));
                out[k] = running;
            }
        }
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// One unordered algorithm pair within an (env, T) group.
#[derive(Debug, Clone, PartialEq)]
pub struct PairComparison {
    pub alg_a: String,
    pub alg_b: String,
    /// `None` when the test was skipped.
    pub p_raw: Option<f64>,
    pub p_adj: Option<f64>,
    /// Median of `acr(a) - acr(b)` over paired runs.
    pub median_diff: f64,
    /// +1 a wins, −1 b wins, 0 not significant; `None` if skipped.
    pub outcome: Option<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseOutcome {
    pub algorithms: Vec<String>,
    /// `matrix[i][j]`: +1 row beats column, −1 loses, 0 otherwise.
    pub matrix: Vec<Vec<i8>>,
    pub pairs: Vec<PairComparison>,
}

impl PairwiseOutcome {
    pub fn entry(&self, a: &str, b: &str) -> Option<i8> {
        let i = self.algorithms.iter().position(|x| x == a)?;
        let j = self.algorithms.iter().position(|x| x == b)?;
        Some(self.matrix[i][j])
    }
}

/// Per-algorithm samples keyed by run index; pairing uses shared run indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSample {
    pub algorithm: String,
    pub runs: Vec<(u64, f64)>,
}

fn paired(a: &AlgorithmSample, b: &AlgorithmSample) -> (Vec<f64>, Vec<f64>) {
    let mut left: Vec<(u64, f64)> = a.runs.clone();
    let mut right: Vec<(u64, f64)> = b.runs.clone();
    left.sort_by_key(|r| r.0);
    right.sort_by_key(|r| r.0);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        match left[i].0.cmp(&right[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                x.push(left[i].1);
                y.push(right[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    (x, y)
}

/// All-pairs paired tests for one (env, T) group, adjusted together.
pub fn pairwise_matrix(
    samples: &[AlgorithmSample],
    alpha: f64,
    test: PairedTest,
    correction: Correction,
) -> Result<PairwiseOutcome> {
    if samples.len() < 2 {
        return Err(Error::Contract("pairwise comparison needs at least two algorithms".into()));
    }
    let k = samples.len();
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (x, y) = paired(&samples[i], &samples[j]);
            let res = match test {
                PairedTest::Wilcoxon => wilcoxon_signed_rank(&x, &y, WilcoxonMode::Auto)?,
                PairedTest::Sign => sign_test(&x, &y)?,
            };
            let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).filter(|d| d.is_finite()).collect();
            pairs.push(PairComparison {
                alg_a: samples[i].algorithm.clone(),
                alg_b: samples[j].algorithm.clone(),
                p_raw: res.map(|r| r.p_two_sided),
                p_adj: None,
                median_diff: median(&diffs),
                outcome: None,
            });
        }
    }
    let tested: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].p_raw.is_some()).collect();
    let raw: Vec<f64> = tested.iter().map(|&i| pairs[i].p_raw.unwrap()).collect();
    let adjusted = adjust_pvalues(&raw, correction);
    for (&i, &p) in tested.iter().zip(&adjusted) {
        let pair = &mut pairs[i];
        pair.p_adj = Some(p);
        pair.outcome = Some(if p < alpha && pair.median_diff > 0.0 {
            1
        } else if p < alpha && pair.median_diff < 0.0 {
            -1
        } else {
            0
        });
    }
    if tested.is_empty() {
        log::warn!("every pair was skipped: fewer than two effective samples");
    }
    let algorithms: Vec<String> = samples.iter().map(|s| s.algorithm.clone()).collect();
    let mut matrix = vec![vec![0i8; k]; k];
    let mut idx = 0;
    for i in 0..k {
        for j in i + 1..k {
            let o = pairs[idx].outcome.unwrap_or(0);
            matrix[i][j] = o;
            matrix[j][i] = -o;
            idx += 1;
        }
    }
    Ok(PairwiseOutcome {
        algorithms,
        matrix,
        pairs,
    })
}
