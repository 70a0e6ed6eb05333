//! Utility aggregators for inference-scaled responses and their exact
//! expectations.
//!
//! A response set of `N` completions is turned into one scalar utility under a
//! [`Context`]:
//!
//! * **Best-of-N** keeps the largest context-weighted score and pays for every
//!   completion.
//! * **Majority voting** credits `1[n_gold = n*] / t`, the probability that a
//!   uniformly random tie-break among the `t` most-voted answers lands on the
//!   gold answer, and pays for every completion.
//! * The **inference-agnostic** utility is the cost-free mean of per-completion
//!   scores, i.e. what a prompt-only optimizer sees.
//!
//! Costs are stored non-negative and every context carries a non-positive
//! `cost_weight`, so the cost term is always `cost_weight * sum(cost)`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Guard on the number of vote-count vectors [`expected_mv_exact`] enumerates.
pub const MV_ENUMERATION_LIMIT: u128 = 10_000_000;

/// Tolerance used when checking that probabilities sum to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// User preferences: weights over the task objectives plus a cost weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub task_weights: Vec<f64>,
    pub cost_weight: f64,
}

impl Context {
    pub fn new(id: impl Into<String>, task_weights: Vec<f64>, cost_weight: f64) -> Result<Self> {
        let ctx = Self {
            id: id.into(),
            task_weights,
            cost_weight,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_weights.is_empty() {
            return Err(Error::Validation(format!("context {}: no task weights", self.id)));
        }
        if self.task_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!(
                "context {}: task weights must be finite and non-negative",
                self.id
            )));
        }
        if self.task_weights.len() >= 2 {
            let sum: f64 = self.task_weights.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Validation(format!(
                    "context {}: task weights sum to {sum}, expected 1",
                    self.id
                )));
            }
        }
        if !self.cost_weight.is_finite() || self.cost_weight > 0.0 {
            return Err(Error::Validation(format!(
                "context {}: cost weight must be finite and <= 0",
                self.id
            )));
        }
        Ok(())
    }

    /// Weighted task score `sum_k w_k o_k`.
    #[inline]
    pub fn score(&self, objectives: &[f64]) -> f64 {
        self.task_weights
            .iter()
            .zip(objectives)
            .map(|(w, o)| w * o)
            .sum()
    }
}

/// An arm: a prompt (with its decoding configuration folded in) and a number
/// of sampled completions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub prompt: usize,
    pub scale: u32,
}

impl Arm {
    pub const fn new(prompt: usize, scale: u32) -> Self {
        Self { prompt, scale }
    }
}

/// What a single completion produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeValue {
    /// Per-objective scores (Best-of-N environments).
    Objectives(Vec<f64>),
    /// Extracted answer (majority-voting environments).
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionOutcome {
    pub value: OutcomeValue,
    pub cost: f64,
}

impl CompletionOutcome {
    pub fn scored(objectives: Vec<f64>, cost: f64) -> Self {
        Self {
            value: OutcomeValue::Objectives(objectives),
            cost,
        }
    }

    pub fn labeled(label: impl Into<String>, cost: f64) -> Self {
        Self {
            value: OutcomeValue::Label(label.into()),
            cost,
        }
    }
}

fn total_cost(outcomes: &[CompletionOutcome]) -> f64 {
    outcomes.iter().map(|o| o.cost).sum()
}

fn require_nonempty(outcomes: &[CompletionOutcome]) -> Result<()> {
    if outcomes.is_empty() {
        Err(contract("utility of an empty outcome list"))
    } else {
        Ok(())
    }
}

fn objectives(o: &CompletionOutcome) -> Result<&[f64]> {
    match &o.value {
        OutcomeValue::Objectives(v) => Ok(v),
        OutcomeValue::Label(_) => Err(Error::ModeMismatch { expected: "best-of-n" }),
    }
}

fn label(o: &CompletionOutcome) -> Result<&str> {
    match &o.value {
        OutcomeValue::Label(l) => Ok(l),
        OutcomeValue::Objectives(_) => Err(Error::ModeMismatch {
            expected: "majority-vote",
        }),
    }
}

/// Best-of-N utility: `max_i score(i) + cost_weight * sum_i cost_i`.
pub fn bon_utility(outcomes: &[CompletionOutcome], ctx: &Context) -> Result<f64> {
    require_nonempty(outcomes)?;
    let mut best = f64::NEG_INFINITY;
    for o in outcomes {
        best = best.max(ctx.score(objectives(o)?));
    }
    Ok(best + ctx.cost_weight * total_cost(outcomes))
}

/// Majority-vote utility: `w_1 * 1[n_gold = n*] / t + cost_weight * sum_i cost_i`.
///
/// The gold label need not appear among the votes; it then earns no credit.
pub fn mv_utility(outcomes: &[CompletionOutcome], gold: &str, ctx: &Context) -> Result<f64> {
    require_nonempty(outcomes)?;
    let mut labels: Vec<&str> = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        labels.push(label(o)?);
    }
    labels.sort_unstable();
    let mut counts: Vec<u32> = Vec::new();
    let mut gold_slot = None;
    for group in labels.chunk_by(|a, b| a == b) {
        if group[0] == gold {
            gold_slot = Some(counts.len());
        }
        counts.push(group.len() as u32);
    }
    let credit = vote_credit(&counts, gold_slot);
    Ok(ctx.task_weights[0] * credit + ctx.cost_weight * total_cost(outcomes))
}

/// Cost-free mean of per-completion weighted scores. In majority-vote mode the
/// per-completion score is `w_1 * 1[label = gold]`, and `gold` is required.
pub fn ia_utility(outcomes: &[CompletionOutcome], gold: Option<&str>, ctx: &Context) -> Result<f64> {
    require_nonempty(outcomes)?;
    let mut sum = 0.0;
    for o in outcomes {
        sum += match &o.value {
            OutcomeValue::Objectives(v) => ctx.score(v),
            OutcomeValue::Label(l) => {
                let gold = gold.ok_or_else(|| contract("majority-vote outcomes need a gold label"))?;
                if l == gold {
                    ctx.task_weights[0]
                } else {
                    0.0
                }
            }
        };
    }
    Ok(sum / outcomes.len() as f64)
}

/// Success credit `1[n_gold = n*] / t` from per-label vote counts.
///
/// `gold` indexes into `counts`; `None` means the gold answer received no
/// slot (it never appears among the candidates), which earns zero.
#[inline]
pub fn vote_credit(counts: &[u32], gold: Option<usize>) -> f64 {
    let Some(g) = gold else { return 0.0 };
    let top = counts.iter().copied().max().unwrap_or(0);
    if top == 0 || counts[g] != top {
        return 0.0;
    }
    let ties = counts.iter().filter(|&&c| c == top).count();
    1.0 / ties as f64
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty support".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {sum}"
        )));
    }
    Ok(())
}

/// Number of vote-count vectors (compositions of `n` into `c` non-negative parts).
pub fn composition_count(n: u32, c: usize) -> u128 {
    // C(n + c - 1, c - 1), computed incrementally; saturates instead of overflowing.
    let k = c.saturating_sub(1) as u128;
    let n = u128::from(n);
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = match acc.checked_mul(n + i) {
            Some(v) => v / i,
            None => return u128::MAX,
        };
    }
    acc
}

/// Exact `E[1[n_gold = n*] / t]` for `n` i.i.d. votes drawn from `probs`.
///
/// Enumerates every vote-count vector weighted by its multinomial
/// probability. `gold = None` (gold absent from the candidates) yields zero.
pub fn expected_mv_exact(probs: &[f64], gold: Option<usize>, n: u32) -> Result<f64> {
    check_distribution(probs)?;
    if n == 0 {
        return Err(contract("majority vote needs at least one vote"));
    }
    let Some(gold) = gold else { return Ok(0.0) };
    if gold >= probs.len() {
        return Err(contract(format!(
            "gold index {gold} outside {} categories",
            probs.len()
        )));
    }
    let compositions = composition_count(n, probs.len());
    if compositions > MV_ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            compositions,
            limit: MV_ENUMERATION_LIMIT,
        });
    }

    let ln_fact: Vec<f64> = ln_factorials(n as usize);
    let ln_p: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let mut counts = vec![0u32; probs.len()];
    let mut total = 0.0;
    enumerate(&mut counts, 0, n, &mut |counts| {
        let mut ln_w = ln_fact[n as usize];
        for (i, &k) in counts.iter().enumerate() {
            if k > 0 {
                if probs[i] == 0.0 {
                    return;
                }
                ln_w += k as f64 * ln_p[i] - ln_fact[k as usize];
            }
        }
        let credit = vote_credit(counts, Some(gold));
        if credit > 0.0 {
            total += credit * ln_w.exp();
        }
    });
    Ok(total.clamp(0.0, 1.0))
}

fn enumerate(counts: &mut [u32], slot: usize, remaining: u32, visit: &mut dyn FnMut(&[u32])) {
    if slot + 1 == counts.len() {
        counts[slot] = remaining;
        visit(counts);
        return;
    }
    for k in 0..=remaining {
        counts[slot] = k;
        enumerate(counts, slot + 1, remaining - k, visit);
    }
    counts[slot] = 0;
}

pub(crate) fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Exact expected Best-of-N utility for a scalar score distribution:
/// `sum_j v_j (F(v_j)^N - F(v_{j-1})^N) + cost_weight * total_cost`.
pub fn expected_bon_exact(
    values: &[f64],
    probs: &[f64],
    n: u32,
    total_cost: f64,
    cost_weight: f64,
) -> Result<f64> {
    if values.len() != probs.len() {
        return Err(Error::InvalidDistribution(
            "support and probability lengths differ".into(),
        ));
    }
    check_distribution(probs)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite support value".into()));
    }
    if n == 0 {
        return Err(contract("best-of-n needs at least one draw"));
    }
    Ok(expected_max(values, probs, n) + cost_weight * total_cost)
}

/// `E[max of n draws]` without validation; used on the hot evaluation path.
pub(crate) fn expected_max(values: &[f64], probs: &[f64], n: u32) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let n = n as i32;
    let mut cdf = 0.0f64;
    let mut prev_pow = 0.0f64;
    let mut acc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = values[order[i]];
        while i < order.len() && values[order[i]] == v {
            cdf += probs[order[i]];
            i += 1;
        }
        let f = if i == order.len() { 1.0 } else { cdf.min(1.0) };
        let pow = f.powi(n);
        acc += v * (pow - prev_pow);
        prev_pow = pow;
    }
    acc
}

/// Indices attaining the maximum of `values` (exact float comparison).
pub fn argmax_set(values: &[f64]) -> Vec<usize> {
    let Some(best) = values.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == best)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx(w: &[f64], cw: f64) -> Context {
        Context::new("c", w.to_vec(), cw).unwrap()
    }

    fn scored(scores: &[f64], cost: f64) -> Vec<CompletionOutcome> {
        scores
            .iter()
            .map(|&s| CompletionOutcome::scored(vec![s], cost))
            .collect()
    }

    fn votes(labels: &[&str], cost: f64) -> Vec<CompletionOutcome> {
        labels
            .iter()
            .map(|&l| CompletionOutcome::labeled(l, cost))
            .collect()
    }

    #[test]
    fn bon_examples() {
        let u = bon_utility(&scored(&[0.2, 0.9, 0.5], 0.1), &ctx(&[1.0], -0.1)).unwrap();
        assert_abs_diff_eq!(u, 0.87, epsilon = 1e-12);
        let u = bon_utility(&scored(&[0.4], 0.3), &ctx(&[1.0], 0.0)).unwrap();
        assert_abs_diff_eq!(u, 0.4, epsilon = 1e-12);
        let u = bon_utility(&scored(&[0.6, 0.6], 0.02), &ctx(&[1.0], -1.0)).unwrap();
        assert_abs_diff_eq!(u, 0.56, epsilon = 1e-12);
    }

    #[test]
    fn bon_uses_weighted_sum_of_objectives() {
        let outs = vec![
            CompletionOutcome::scored(vec![4.0, -4.0], 0.0),
            CompletionOutcome::scored(vec![1.0, 1.0], 0.0),
        ];
        let u = bon_utility(&outs, &ctx(&[0.3, 0.7], 0.0)).unwrap();
        assert_abs_diff_eq!(u, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mv_examples() {
        let c = ctx(&[1.0], 0.0);
        assert_eq!(mv_utility(&votes(&["A", "A", "B"], 0.0), "A", &c).unwrap(), 1.0);
        assert_eq!(mv_utility(&votes(&["A", "B"], 0.0), "A", &c).unwrap(), 0.5);
        let u = mv_utility(&votes(&["A", "A", "B"], 0.02), "C", &ctx(&[1.0], -0.2)).unwrap();
        assert_abs_diff_eq!(u, -0.012, epsilon = 1e-12);
    }

    #[test]
    fn mv_three_way_tie() {
        let c = ctx(&[1.0], 0.0);
        let u = mv_utility(&votes(&["A", "B", "C"], 0.0), "B", &c).unwrap();
        assert_abs_diff_eq!(u, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn ia_examples() {
        let c = ctx(&[1.0], -5.0);
        let u = ia_utility(&scored(&[0.2, 0.9, 0.5], 1.0), None, &c).unwrap();
        assert_abs_diff_eq!(u, 1.6 / 3.0, epsilon = 1e-12);
        assert_eq!(ia_utility(&scored(&[0.4], 1.0), None, &c).unwrap(), 0.4);
        assert_eq!(ia_utility(&votes(&["A", "B"], 1.0), Some("A"), &c).unwrap(), 0.5);
    }

    #[test]
    fn ia_matches_bon_for_single_completion_without_cost() {
        let c = ctx(&[0.25, 0.75], 0.0);
        let one = vec![CompletionOutcome::scored(vec![2.0, -1.0], 0.7)];
        assert_eq!(
            ia_utility(&one, None, &c).unwrap(),
            bon_utility(&one, &c).unwrap()
        );
    }

    #[test]
    fn error_paths() {
        let c = ctx(&[1.0], 0.0);
        assert!(matches!(bon_utility(&[], &c), Err(Error::Contract(_))));
        assert!(matches!(mv_utility(&[], "A", &c), Err(Error::Contract(_))));
        assert!(matches!(
            bon_utility(&votes(&["A"], 0.0), &c),
            Err(Error::ModeMismatch { .. })
        ));
        assert!(matches!(
            mv_utility(&scored(&[1.0], 0.0), "A", &c),
            Err(Error::ModeMismatch { .. })
        ));
        assert!(ia_utility(&votes(&["A"], 0.0), None, &c).is_err());
    }

    #[test]
    fn context_validation() {
        assert!(Context::new("x", vec![0.5, 0.5], 0.0).is_ok());
        assert!(Context::new("x", vec![0.5, 0.6], 0.0).is_err());
        assert!(Context::new("x", vec![-0.1], 0.0).is_err());
        assert!(Context::new("x", vec![1.0], 0.1).is_err());
        assert!(Context::new("x", vec![], 0.0).is_err());
    }

    // Independent binomial-sum oracle for the two-label case.
    fn binomial_mv(p: f64, n: u32) -> f64 {
        let mut total = 0.0;
        for k in 0..=n {
            let w = binom(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
            if 2 * k > n {
                total += w;
            } else if 2 * k == n {
                total += 0.5 * w;
            }
        }
        total
    }

    fn binom(n: u32, k: u32) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
    }

    #[test]
    fn mv_exact_examples() {
        let v = expected_mv_exact(&[0.4, 0.6], Some(0), 10).unwrap();
        assert_abs_diff_eq!(v, 0.266_567_68, epsilon = 1e-10);
        let v = expected_mv_exact(&[0.62, 0.38], Some(0), 10).unwrap();
        assert_abs_diff_eq!(v, 0.773_776_343_757, epsilon = 1e-10);
        assert_abs_diff_eq!(v, 0.77, epsilon = 0.005);
        let v = expected_mv_exact(&[0.2, 0.3, 0.5], Some(1), 1).unwrap();
        assert_abs_diff_eq!(v, 0.3, epsilon = 1e-12);
        for n in 1..20 {
            let v = expected_mv_exact(&[0.5, 0.5], Some(1), n).unwrap();
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn mv_exact_matches_binomial_oracle() {
        for &p in &[0.05, 0.3, 0.5, 0.71, 0.99] {
            for n in 1..=32 {
                let v = expected_mv_exact(&[p, 1.0 - p], Some(0), n).unwrap();
                assert_abs_diff_eq!(v, binomial_mv(p, n), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mv_exact_guards() {
        assert!(matches!(
            expected_mv_exact(&[0.5, 0.4], Some(0), 3),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(matches!(
            expected_mv_exact(&[0.1; 10], Some(0), 200),
            Err(Error::EnumerationTooLarge { .. })
        ));
        assert_eq!(expected_mv_exact(&[0.5, 0.5], None, 3).unwrap(), 0.0);
        assert_eq!(composition_count(32, 5), 58_905);
        assert!(expected_mv_exact(&[0.2; 5], Some(0), 32).is_ok());
    }

    #[test]
    fn bon_exact_examples() {
        assert_eq!(expected_bon_exact(&[3.0], &[1.0], 5, 0.0, 0.0).unwrap(), 3.0);
        let v = expected_bon_exact(&[0.0, 1.0], &[0.5, 0.5], 2, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(v, 0.75, epsilon = 1e-15);
        let values = [-1.0, 0.5, 2.0, 0.5];
        let probs = [0.1, 0.2, 0.3, 0.4];
        let mean: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
        let v = expected_bon_exact(&values, &probs, 1, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(v, mean, epsilon = 1e-12);
        let v = expected_bon_exact(&[0.0, 1.0], &[0.5, 0.5], 2, 0.04, -1.0).unwrap();
        assert_abs_diff_eq!(v, 0.71, epsilon = 1e-12);
        assert!(expected_bon_exact(&[0.0, 1.0], &[0.5, 0.6], 2, 0.0, 0.0).is_err());
    }

    #[test]
    fn argmax_set_reports_ties() {
        assert_eq!(argmax_set(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2]);
        assert!(argmax_set(&[]).is_empty());
    }
}
