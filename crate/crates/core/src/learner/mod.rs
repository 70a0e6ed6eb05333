//! Policy learners and the bookkeeping they share.
//!
//! Every learner trains on the training side of a [`SplitView`], spends at
//! most `T` completions, and returns a [`LearnOutcome`]: one deployment per
//! context, the budget ledger and the final Q estimates.

pub mod baselines;
pub mod psst;

use serde::{Deserialize, Serialize};

use crate::aggregate::{Arm, Context};
use crate::env::{AggregatorKind, EnvironmentModel, PullRecord, SplitView};
use crate::error::{contract, Error, Result};
use crate::rng::Stream;

pub use baselines::{run_baseline, ucb_index, BaselineSpec};
pub use psst::{
    allocate, estimate_q, halve_context, partition_blocks, run_psst, run_psst_topk, topk_screen,
    Allocation, PsstOptions, Screening,
};

/// The scale set and the prompt × scale arm indexing used by a learner.
///
/// Arm index = `prompt * scales.len() + scale_position`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmSpace {
    n_prompts: usize,
    scales: Vec<u32>,
}

impl ArmSpace {
    pub fn new(n_prompts: usize, mut scales: Vec<u32>) -> Result<Self> {
        scales.sort_unstable();
        scales.dedup();
        if n_prompts == 0 || scales.is_empty() || scales[0] == 0 {
            return Err(contract("arm space needs prompts and positive scales"));
        }
        Ok(Self { n_prompts, scales })
    }

    /// Every scale `1..=n_max`.
    pub fn full(env: &EnvironmentModel) -> Self {
        Self {
            n_prompts: env.num_prompts(),
            scales: (1..=env.n_max()).collect(),
        }
    }

    /// Powers of two up to `n_max`.
    pub fn powers_of_two(env: &EnvironmentModel) -> Self {
        Self {
            n_prompts: env.num_prompts(),
            scales: std::iter::successors(Some(1u32), |s| s.checked_mul(2))
                .take_while(|&s| s <= env.n_max())
                .collect(),
        }
    }

    pub fn with_scales(env: &EnvironmentModel, scales: Vec<u32>) -> Result<Self> {
        let space = Self::new(env.num_prompts(), scales)?;
        if space.max_scale() > env.n_max() {
            return Err(contract(format!(
                "scale {} exceeds n_max {}",
                space.max_scale(),
                env.n_max()
            )));
        }
        Ok(space)
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn scales(&self) -> &[u32] {
        &self.scales
    }

    pub fn max_scale(&self) -> u32 {
        *self.scales.last().expect("non-empty scale set")
    }

    pub fn len(&self) -> usize {
        self.n_prompts * self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn arm(&self, index: usize) -> Arm {
        let k = self.scales.len();
        Arm::new(index / k, self.scales[index % k])
    }

    pub fn index(&self, arm: Arm) -> Option<usize> {
        if arm.prompt >= self.n_prompts {
            return None;
        }
        let pos = self.scales.binary_search(&arm.scale).ok()?;
        Some(arm.prompt * self.scales.len() + pos)
    }

    pub(crate) fn index_of(&self, prompt: usize, scale_pos: usize) -> usize {
        prompt * self.scales.len() + scale_pos
    }

    /// Deterministic tie order: smaller scale first, then smaller prompt.
    pub fn tie_key(&self, index: usize) -> (u32, usize) {
        let a = self.arm(index);
        (a.scale, a.prompt)
    }
}

/// Per (context, arm) activity flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveFlags {
    n_contexts: usize,
    n_arms: usize,
    flags: Vec<bool>,
}

impl ActiveFlags {
    pub fn all(n_contexts: usize, n_arms: usize) -> Self {
        Self {
            n_contexts,
            n_arms,
            flags: vec![true; n_contexts * n_arms],
        }
    }

    pub fn none(n_contexts: usize, n_arms: usize) -> Self {
        Self {
            n_contexts,
            n_arms,
            flags: vec![false; n_contexts * n_arms],
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    #[inline]
    pub fn is_active(&self, context: usize, arm: usize) -> bool {
        self.flags[context * self.n_arms + arm]
    }

    pub fn set(&mut self, context: usize, arm: usize, active: bool) {
        self.flags[context * self.n_arms + arm] = active;
    }

    pub fn count(&self, context: usize) -> usize {
        self.row(context).iter().filter(|&&f| f).count()
    }

    pub fn active_arms(&self, context: usize) -> Vec<usize> {
        self.row(context)
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(a, _)| a)
            .collect()
    }

    /// Arms active in at least one context.
    pub fn union(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_arms];
        for c in 0..self.n_contexts {
            for (u, &f) in out.iter_mut().zip(self.row(c)) {
                *u |= f;
            }
        }
        out
    }

    fn row(&self, context: usize) -> &[bool] {
        &self.flags[context * self.n_arms..(context + 1) * self.n_arms]
    }
}

/// Running sums and sample counts of aggregated utility per (context, arm).
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_contexts: usize,
    n_arms: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl QTable {
    pub fn new(n_contexts: usize, n_arms: usize) -> Self {
        Self {
            n_contexts,
            n_arms,
            sums: vec![0.0; n_contexts * n_arms],
            counts: vec![0; n_contexts * n_arms],
        }
    }

    /// A table whose means are exactly `values[c][a]` (count 1 each).
    pub fn from_means(values: &[Vec<f64>]) -> Self {
        let n_arms = values.first().map_or(0, Vec::len);
        let mut q = Self::new(values.len(), n_arms);
        for (c, row) in values.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                q.add(c, a, v);
            }
        }
        q
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    #[inline]
    pub fn add(&mut self, context: usize, arm: usize, utility: f64) {
        let i = context * self.n_arms + arm;
        self.sums[i] += utility;
        self.counts[i] += 1;
    }

    pub fn count(&self, context: usize, arm: usize) -> u64 {
        self.counts[context * self.n_arms + arm]
    }

    pub fn mean(&self, context: usize, arm: usize) -> Option<f64> {
        let i = context * self.n_arms + arm;
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Best sampled arm for `context` among `candidates`, ties broken by
    /// `tie_key` ascending. Returns `None` if no candidate has samples.
    pub fn best<K: Ord>(
        &self,
        context: usize,
        candidates: impl IntoIterator<Item = usize>,
        tie_key: impl Fn(usize) -> K,
    ) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for a in candidates {
            let Some(m) = self.mean(context, a) else { continue };
            best = match best {
                None => Some((a, m)),
                Some((b, bm)) => {
                    if m > bm || (m == bm && tie_key(a) < tie_key(b)) {
                        Some((a, m))
                    } else {
                        Some((b, bm))
                    }
                }
            };
        }
        best.map(|(a, _)| a)
    }
}

/// What a learned policy deploys in one context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deployment {
    Fixed { prompt: usize, scale: u32 },
    /// Prompt fixed, scale drawn uniformly from the scale set on every query.
    RandomScale { prompt: usize },
}

impl Deployment {
    pub fn fixed(arm: Arm) -> Self {
        Deployment::Fixed {
            prompt: arm.prompt,
            scale: arm.scale,
        }
    }

    pub fn prompt(&self) -> usize {
        match *self {
            Deployment::Fixed { prompt, .. } | Deployment::RandomScale { prompt } => prompt,
        }
    }
}

/// Context index → deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub deployments: Vec<Deployment>,
    /// Scales a `RandomScale` deployment draws from.
    pub scales: Vec<u32>,
}

impl Policy {
    pub fn get(&self, context: usize) -> Deployment {
        self.deployments[context]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub label: String,
    /// Completions this round was allowed to spend.
    pub budget: u64,
    /// Completions actually spent.
    pub consumed: u64,
    pub pulls: u64,
    /// Completions for one pull of every allocated arm (halving rounds only).
    pub unit_cost: u64,
}

/// Completion accounting. `consumed <= total` always holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: u64,
    pub consumed: u64,
    pub rounds: Vec<RoundLedger>,
}

impl BudgetLedger {
    pub fn new(total: u64) -> Self {
        Self {
            total,
            consumed: 0,
            rounds: Vec::new(),
        }
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.consumed
    }

    /// Budget left unspent.
    pub fn discarded(&self) -> u64 {
        self.total - self.consumed
    }

    pub(crate) fn charge(&mut self, completions: u64) -> Result<()> {
        if completions > self.remaining() {
            return Err(contract(format!(
                "charging {completions} completions with {} left",
                self.remaining()
            )));
        }
        self.consumed += completions;
        Ok(())
    }

    pub(crate) fn close_round(&mut self, label: impl Into<String>, budget: u64, consumed: u64, pulls: u64) {
        self.rounds.push(RoundLedger {
            label: label.into(),
            budget,
            consumed,
            pulls,
            unit_cost: 0,
        });
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub policy: Policy,
    pub ledger: BudgetLedger,
    pub q: QTable,
    pub space: ArmSpace,
}

/// Uniform query from the training side (with replacement).
pub(crate) fn sample_query(split: &SplitView, rng: &mut Stream) -> Result<usize> {
    if split.train.is_empty() {
        return Err(contract("empty training split"));
    }
    Ok(split.train[rng.index(split.train.len())])
}

/// Scores pull records into a [`QTable`] under every context.
///
/// With block reuse a record of scale `N_i` contributes `floor(N_i / N_j)`
/// consecutive blocks to each arm `(p, N_j)` with `N_j <= N_i`; without it the
/// record only scores its own arm.
pub(crate) struct BlockScorer<'a> {
    env: &'a EnvironmentModel,
    space: &'a ArmSpace,
    /// Context-major weighted scores of the current record (Best-of-N).
    scores: Vec<f64>,
    utilities: Vec<f64>,
}

impl<'a> BlockScorer<'a> {
    pub(crate) fn new(env: &'a EnvironmentModel, space: &'a ArmSpace) -> Self {
        Self {
            env,
            space,
            scores: Vec::new(),
            utilities: vec![0.0; env.num_contexts()],
        }
    }

    pub(crate) fn accumulate(
        &mut self,
        record: &PullRecord,
        flags: Option<&ActiveFlags>,
        block_reuse: bool,
        q: &mut QTable,
    ) {
        let prompt = record.arm.prompt;
        let n_i = record.outcomes.len();
        let contexts = self.env.contexts();
        if self.env.aggregator() == AggregatorKind::Bon {
            self.fill_scores(record, contexts);
        }
        let positions: Vec<usize> = if block_reuse {
            (0..self.space.scales().len())
                .filter(|&j| self.space.scales()[j] as usize <= n_i)
                .collect()
        } else {
            match self.space.scales().binary_search(&record.arm.scale) {
                Ok(j) => vec![j],
                Err(_) => return,
            }
        };
        for j in positions {
            let arm = self.space.index_of(prompt, j);
            let wanted: Vec<usize> = (0..contexts.len())
                .filter(|&c| flags.is_none_or(|f| f.is_active(c, arm)))
                .collect();
            if wanted.is_empty() {
                continue;
            }
            let n_j = self.space.scales()[j] as usize;
            for b in 0..n_i / n_j {
                let (lo, hi) = (b * n_j, (b + 1) * n_j);
                self.block_utilities(record, lo, hi, contexts);
                for &c in &wanted {
                    q.add(c, arm, self.utilities[c]);
                }
            }
        }
    }

    fn fill_scores(&mut self, record: &PullRecord, contexts: &[Context]) {
        let n = record.outcomes.len();
        let support = &self.env.dist(record.query, record.arm.prompt).support;
        self.scores.clear();
        self.scores.resize(contexts.len() * n, 0.0);
        for (c, ctx) in contexts.iter().enumerate() {
            for (i, &o) in record.outcomes.iter().enumerate() {
                self.scores[c * n + i] = ctx.score(support.vector(o as usize));
            }
        }
    }

    fn block_utilities(&mut self, record: &PullRecord, lo: usize, hi: usize, contexts: &[Context]) {
        let cost = self.env.prompt_cost(record.arm.prompt) * (hi - lo) as f64;
        match self.env.aggregator() {
            AggregatorKind::Mv => {
                let credit = self
                    .env
                    .mv_credit(record.query, record.arm.prompt, &record.outcomes[lo..hi]);
                for (u, ctx) in self.utilities.iter_mut().zip(contexts) {
                    *u = ctx.task_weights[0] * credit + ctx.cost_weight * cost;
                }
            }
            AggregatorKind::Bon => {
                let n = record.outcomes.len();
                for (c, ctx) in contexts.iter().enumerate() {
                    let best = self.scores[c * n + lo..c * n + hi]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    self.utilities[c] = best + ctx.cost_weight * cost;
                }
            }
        }
    }
}

/// Exact Q over the given queries for every (context, arm) of `space`.
pub fn exact_q_table(env: &EnvironmentModel, space: &ArmSpace, queries: &[usize]) -> Result<QTable> {
    if queries.is_empty() {
        return Err(contract("exact Q needs at least one query"));
    }
    let mut values = vec![vec![0.0; space.len()]; env.num_contexts()];
    for a in 0..space.len() {
        let arm = space.arm(a);
        for &x in queries {
            match env.aggregator() {
                AggregatorKind::Mv => {
                    let credit = env.exact_mv_credit(x, arm.prompt, arm.scale, crate::env::Side::Train)?;
                    for (c, ctx) in env.contexts().iter().enumerate() {
                        values[c][a] += ctx.task_weights[0] * credit;
                    }
                }
                AggregatorKind::Bon => {
                    for (c, ctx) in env.contexts().iter().enumerate() {
                        values[c][a] += env.exact_bon_task(ctx, x, arm.prompt, arm.scale, crate::env::Side::Train);
                    }
                }
            }
        }
        let cost = env.prompt_cost(arm.prompt) * f64::from(arm.scale);
        for (c, ctx) in env.contexts().iter().enumerate() {
            values[c][a] = values[c][a] / queries.len() as f64 + ctx.cost_weight * cost;
        }
    }
    Ok(QTable::from_means(&values))
}

pub(crate) fn infeasible(budget: u64, minimal: u64, detail: impl Into<String>) -> Error {
    Error::InfeasibleBudget {
        budget,
        minimal,
        detail: detail.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_space_indexing() {
        let space = ArmSpace::new(3, vec![4, 1, 2, 2]).unwrap();
        assert_eq!(space.scales(), &[1, 2, 4]);
        assert_eq!(space.len(), 9);
        for i in 0..space.len() {
            assert_eq!(space.index(space.arm(i)), Some(i));
        }
        assert_eq!(space.index(Arm::new(0, 3)), None);
        assert_eq!(space.index(Arm::new(3, 1)), None);
        assert!(ArmSpace::new(2, vec![0, 1]).is_err());
    }

    #[test]
    fn qtable_best_uses_tie_rule() {
        let space = ArmSpace::new(2, vec![1, 2]).unwrap();
        // arms: (0,1) (0,2) (1,1) (1,2)
        let q = QTable::from_means(&[vec![0.5, 0.7, 0.7, 0.1]]);
        assert_eq!(q.best(0, 0..4, |a| space.tie_key(a)), Some(2));
        let empty = QTable::new(1, 4);
        assert_eq!(empty.best(0, 0..4, |a| space.tie_key(a)), None);
    }

    #[test]
    fn flags_union_and_counts() {
        let mut f = ActiveFlags::none(2, 3);
        f.set(0, 1, true);
        f.set(1, 2, true);
        f.set(1, 1, true);
        assert_eq!(f.union(), vec![false, true, true]);
        assert_eq!(f.count(1), 2);
        assert_eq!(f.active_arms(1), vec![1, 2]);
    }

    #[test]
    fn ledger_never_overspends() {
        let mut l = BudgetLedger::new(10);
        l.charge(6).unwrap();
        assert!(l.charge(5).is_err());
        l.charge(4).unwrap();
        assert_eq!(l.discarded(), 0);
    }
}
