//! Categorical prompt × query environments and the pull interface.
//!
//! An [`EnvironmentModel`] stores, for every (query, prompt) pair, a
//! categorical distribution over completion outcomes: answer labels for
//! majority-vote environments, objective vectors for Best-of-N environments.
//! A pull of arm `(p, N)` on query `x` draws `N` i.i.d. outcomes from that
//! distribution; each completion costs the prompt's per-completion cost.
//!
//! Distributions may carry an optional `test_probs` vector over the same
//! support. When present it is used for pulls and exact evaluation on the
//! held-out side of a split, which models a train-to-test shift.

mod file;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::aggregate::{
    expected_bon_exact, expected_max, expected_mv_exact, vote_credit, CompletionOutcome, Context,
    OutcomeValue, Arm,
};
use crate::error::{contract, Error, Result};
use crate::rng::Stream;

pub use file::{load_env, parse_env, save_env, to_json, FORMAT_VERSION};

/// Probabilities must sum to one within this tolerance.
pub const ENV_PROB_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Mv,
    Bon,
}

impl AggregatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::Mv => "mv",
            AggregatorKind::Bon => "bon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub cost: f64,
}

/// Outcome support of one categorical distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    Labels(Vec<String>),
    /// Row-major `len × dim` objective vectors.
    Vectors { dim: usize, values: Vec<f64> },
}

impl Support {
    pub fn len(&self) -> usize {
        match self {
            Support::Labels(l) => l.len(),
            Support::Vectors { dim, values } => values.len() / dim.max(&1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        match self {
            Support::Vectors { dim, values } => &values[i * dim..(i + 1) * dim],
            Support::Labels(_) => &[],
        }
    }

    pub fn vectors_from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        Support::Vectors {
            dim,
            values: rows.iter().flatten().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDist {
    pub support: Support,
    pub probs: Vec<f64>,
    pub test_probs: Option<Vec<f64>>,
}

impl OutcomeDist {
    pub fn new(support: Support, probs: Vec<f64>) -> Self {
        Self {
            support,
            probs,
            test_probs: None,
        }
    }

    pub fn probs_for(&self, side: Side) -> &[f64] {
        match (side, &self.test_probs) {
            (Side::Test, Some(t)) => t,
            _ => &self.probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryModel {
    pub id: String,
    pub gold: Option<String>,
    /// Indexed by prompt.
    pub per_prompt: Vec<OutcomeDist>,
}

/// Which distribution a pull reads: the training one or the (possibly
/// shifted) held-out one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Train,
    Test,
}

/// One sampled pull. `outcomes[i]` indexes into the support of the
/// (query, prompt) distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PullRecord {
    pub arm: Arm,
    pub query: usize,
    pub outcomes: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledDist {
    /// Normalized cumulative probabilities for sampling.
    cdf: Vec<f64>,
    test_cdf: Option<Vec<f64>>,
    /// MV only: support index → query-level label slot.
    label_slot: Vec<u16>,
    /// MV only: position of the gold label in this support.
    gold_pos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledQuery {
    n_labels: usize,
    gold_slot: Option<usize>,
    per_prompt: Vec<CompiledDist>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentModel {
    name: String,
    aggregator: AggregatorKind,
    n_max: u32,
    objective_bounds: Vec<[f64; 2]>,
    prompts: Vec<Prompt>,
    contexts: Vec<Context>,
    queries: Vec<QueryModel>,
    compiled: Vec<CompiledQuery>,
}

impl EnvironmentModel {
    /// Validates every invariant and precomputes sampling tables.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        aggregator: AggregatorKind,
        n_max: u32,
        objective_bounds: Vec<[f64; 2]>,
        prompts: Vec<Prompt>,
        contexts: Vec<Context>,
        queries: Vec<QueryModel>,
    ) -> Result<Self> {
        let name = name.into();
        if n_max == 0 {
            return Err(Error::Validation("n_max must be at least 1".into()));
        }
        if prompts.is_empty() {
            return Err(Error::Validation("no prompts".into()));
        }
        if queries.is_empty() {
            return Err(Error::Validation("no queries".into()));
        }
        if contexts.is_empty() {
            return Err(Error::Validation("no contexts".into()));
        }
        let k = objective_bounds.len();
        if k == 0 {
            return Err(Error::Validation("objective_bounds is empty".into()));
        }
        if aggregator == AggregatorKind::Mv && k != 1 {
            return Err(Error::Validation(
                "majority-vote environments have exactly one task objective".into(),
            ));
        }
        for (i, b) in objective_bounds.iter().enumerate() {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
                return Err(Error::Validation(format!("objective_bounds[{i}] is not a range")));
            }
        }
        for p in &prompts {
            if !p.cost.is_finite() || p.cost < 0.0 {
                return Err(Error::Validation(format!(
                    "prompt {}: cost must be finite and non-negative",
                    p.id
                )));
            }
        }
        for c in &contexts {
            c.validate()?;
            if c.task_weights.len() != k {
                return Err(Error::Validation(format!(
                    "context {}: {} task weights for {k} objectives",
                    c.id,
                    c.task_weights.len()
                )));
            }
        }

        let mut compiled = Vec::with_capacity(queries.len());
        for q in &queries {
            compiled.push(compile_query(q, &prompts, aggregator, &objective_bounds)?);
        }

        Ok(Self {
            name,
            aggregator,
            n_max,
            objective_bounds,
            prompts,
            contexts,
            queries,
            compiled,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn aggregator(&self) -> AggregatorKind {
        self.aggregator
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn objective_bounds(&self) -> &[[f64; 2]] {
        &self.objective_bounds
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn queries(&self) -> &[QueryModel] {
        &self.queries
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn prompt_cost(&self, prompt: usize) -> f64 {
        self.prompts[prompt].cost
    }

    pub fn dist(&self, query: usize, prompt: usize) -> &OutcomeDist {
        &self.queries[query].per_prompt[prompt]
    }

    /// Table-1 style one-line summary.
    pub fn summary(&self) -> String {
        format!(
            "P={} X={} C={} Nmax={}",
            self.num_prompts(),
            self.num_queries(),
            self.num_contexts(),
            self.n_max
        )
    }

    fn check_arm(&self, arm: Arm, query: usize) -> Result<()> {
        if arm.prompt >= self.prompts.len() {
            return Err(contract(format!("prompt index {} out of range", arm.prompt)));
        }
        if arm.scale == 0 || arm.scale > self.n_max {
            return Err(contract(format!(
                "scale {} outside 1..={}",
                arm.scale, self.n_max
            )));
        }
        if query >= self.queries.len() {
            return Err(contract(format!("query index {query} out of range")));
        }
        Ok(())
    }

    /// Draws `arm.scale` i.i.d. outcomes from the training distribution.
    pub fn pull(&self, arm: Arm, query: usize, rng: &mut Stream) -> Result<PullRecord> {
        self.pull_from(Side::Train, arm, query, rng)
    }

    pub fn pull_from(&self, side: Side, arm: Arm, query: usize, rng: &mut Stream) -> Result<PullRecord> {
        self.check_arm(arm, query)?;
        let cd = &self.compiled[query].per_prompt[arm.prompt];
        let cdf = match (side, &cd.test_cdf) {
            (Side::Test, Some(t)) => t,
            _ => &cd.cdf,
        };
        let outcomes = (0..arm.scale).map(|_| sample_cdf(cdf, rng.unit())).collect();
        Ok(PullRecord {
            arm,
            query,
            outcomes,
        })
    }

    /// Expands a compact record into full outcome values with costs attached.
    pub fn materialize(&self, record: &PullRecord) -> Vec<CompletionOutcome> {
        let dist = self.dist(record.query, record.arm.prompt);
        let cost = self.prompt_cost(record.arm.prompt);
        record
            .outcomes
            .iter()
            .map(|&o| {
                let value = match &dist.support {
                    Support::Labels(l) => OutcomeValue::Label(l[o as usize].clone()),
                    Support::Vectors { .. } => OutcomeValue::Objectives(dist.support.vector(o as usize).to_vec()),
                };
                CompletionOutcome { value, cost }
            })
            .collect()
    }

    /// Majority-vote success credit of a block of outcomes.
    pub fn mv_credit(&self, query: usize, prompt: usize, outcomes: &[u16]) -> f64 {
        let cq = &self.compiled[query];
        let slots = &cq.per_prompt[prompt].label_slot;
        let mut small = [0u32; 16];
        let mut large;
        let counts: &mut [u32] = if cq.n_labels <= small.len() {
            &mut small[..cq.n_labels]
        } else {
            large = vec![0u32; cq.n_labels];
            &mut large
        };
        for &o in outcomes {
            counts[slots[o as usize] as usize] += 1;
        }
        vote_credit(counts, cq.gold_slot)
    }

    /// Best-of-N task term (max weighted score) of a block under `ctx`.
    pub fn bon_best(&self, ctx: &Context, query: usize, prompt: usize, outcomes: &[u16]) -> f64 {
        let support = &self.dist(query, prompt).support;
        outcomes
            .iter()
            .map(|&o| ctx.score(support.vector(o as usize)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Aggregated utility of a block of outcomes from `(query, prompt)`.
    pub fn block_utility(&self, ctx: &Context, query: usize, prompt: usize, outcomes: &[u16]) -> f64 {
        let cost = ctx.cost_weight * self.prompt_cost(prompt) * outcomes.len() as f64;
        let task = match self.aggregator {
            AggregatorKind::Mv => ctx.task_weights[0] * self.mv_credit(query, prompt, outcomes),
            AggregatorKind::Bon => self.bon_best(ctx, query, prompt, outcomes),
        };
        task + cost
    }

    pub fn record_utility(&self, ctx: &Context, record: &PullRecord) -> f64 {
        self.block_utility(ctx, record.query, record.arm.prompt, &record.outcomes)
    }

    /// Exact majority-vote success probability `E[1[n_gold = n*]/t]` for `n` votes.
    pub fn exact_mv_credit(&self, query: usize, prompt: usize, n: u32, side: Side) -> Result<f64> {
        let cd = &self.compiled[query].per_prompt[prompt];
        let dist = self.dist(query, prompt);
        let probs = normalized(dist.probs_for(side));
        expected_mv_exact(&probs, cd.gold_pos, n)
    }

    /// Exact expected utility of arm `(prompt, n)` on `query` under `ctx`.
    pub fn exact_utility(&self, ctx: &Context, query: usize, prompt: usize, n: u32, side: Side) -> Result<f64> {
        self.check_arm(Arm::new(prompt, n), query)?;
        let total_cost = self.prompt_cost(prompt) * f64::from(n);
        match self.aggregator {
            AggregatorKind::Mv => {
                let credit = self.exact_mv_credit(query, prompt, n, side)?;
                Ok(ctx.task_weights[0] * credit + ctx.cost_weight * total_cost)
            }
            AggregatorKind::Bon => {
                let dist = self.dist(query, prompt);
                let values: Vec<f64> = (0..dist.support.len())
                    .map(|i| ctx.score(dist.support.vector(i)))
                    .collect();
                let probs = normalized(dist.probs_for(side));
                expected_bon_exact(&values, &probs, n, total_cost, ctx.cost_weight)
            }
        }
    }

    /// `E[max weighted score]` for `n` draws; skips validation (hot path).
    pub(crate) fn exact_bon_task(&self, ctx: &Context, query: usize, prompt: usize, n: u32, side: Side) -> f64 {
        let dist = self.dist(query, prompt);
        let values: Vec<f64> = (0..dist.support.len())
            .map(|i| ctx.score(dist.support.vector(i)))
            .collect();
        let probs = normalized(dist.probs_for(side));
        expected_max(&values, &probs, n)
    }
}

fn normalized(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter().map(|x| x / s).collect()
}

#[inline]
fn sample_cdf(cdf: &[f64], u: f64) -> u16 {
    // First index whose cumulative mass exceeds u.
    let i = cdf.partition_point(|&c| c <= u);
    i.min(cdf.len() - 1) as u16
}

fn build_cdf(probs: &[f64]) -> Vec<f64> {
    let s: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p / s;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

fn check_probs(probs: &[f64], len: usize, where_: &dyn Fn() -> String) -> Result<()> {
    if probs.len() != len {
        return Err(Error::Validation(format!(
            "{}: {} probabilities for {len} support entries",
            where_(),
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation(format!(
            "{}: probabilities must be finite and non-negative",
            where_()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ENV_PROB_TOL {
        return Err(Error::Validation(format!(
            "{}: probabilities sum to {sum}",
            where_()
        )));
    }
    Ok(())
}

fn compile_query(
    q: &QueryModel,
    prompts: &[Prompt],
    aggregator: AggregatorKind,
    bounds: &[[f64; 2]],
) -> Result<CompiledQuery> {
    if q.per_prompt.len() != prompts.len() {
        return Err(Error::Validation(format!(
            "query {}: distributions for {} of {} prompts",
            q.id,
            q.per_prompt.len(),
            prompts.len()
        )));
    }
    match (aggregator, &q.gold) {
        (AggregatorKind::Mv, None) => {
            return Err(Error::Validation(format!("query {}: missing gold label", q.id)))
        }
        (AggregatorKind::Bon, Some(_)) => {
            return Err(Error::Validation(format!(
                "query {}: best-of-n queries carry no gold label",
                q.id
            )))
        }
        _ => {}
    }

    let mut labels: Vec<String> = Vec::new();
    if let Some(g) = &q.gold {
        labels.push(g.clone());
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for (pi, dist) in q.per_prompt.iter().enumerate() {
        let where_ = || format!("(prompt {}, query {})", prompts[pi].id, q.id);
        let n = dist.support.len();
        if n == 0 {
            return Err(Error::Validation(format!("{}: empty support", where_())));
        }
        if n > usize::from(u16::MAX) {
            return Err(Error::Validation(format!("{}: support too large", where_())));
        }
        check_probs(&dist.probs, n, &where_)?;
        if let Some(t) = &dist.test_probs {
            check_probs(t, n, &|| format!("{} test_probs", where_()))?;
        }
        let mut label_slot = Vec::new();
        let mut gold_pos = None;
        match (&dist.support, aggregator) {
            (Support::Labels(ls), AggregatorKind::Mv) => {
                for (i, l) in ls.iter().enumerate() {
                    if ls[..i].contains(l) {
                        return Err(Error::Validation(format!("{}: duplicate label {l}", where_())));
                    }
                    let slot = match labels.iter().position(|x| x == l) {
                        Some(s) => s,
                        None => {
                            labels.push(l.clone());
                            labels.len() - 1
                        }
                    };
                    if q.gold.as_deref() == Some(l.as_str()) {
                        gold_pos = Some(i);
                    }
                    label_slot.push(slot as u16);
                }
            }
            (Support::Vectors { dim, values }, AggregatorKind::Bon) => {
                if *dim != bounds.len() || values.len() != n * dim {
                    return Err(Error::Validation(format!(
                        "{}: objective vectors must have {} entries",
                        where_(),
                        bounds.len()
                    )));
                }
                for row in values.chunks(*dim) {
                    for (v, b) in row.iter().zip(bounds) {
                        if !(v.is_finite() && *v >= b[0] && *v <= b[1]) {
                            return Err(Error::Validation(format!(
                                "{}: objective value {v} outside [{}, {}]",
                                where_(),
                                b[0],
                                b[1]
                            )));
                        }
                    }
                }
            }
            _ => {
                return Err(Error::Validation(format!(
                    "{}: support kind does not match aggregator {}",
                    where_(),
                    aggregator.as_str()
                )))
            }
        }
        per_prompt.push(CompiledDist {
            cdf: build_cdf(&dist.probs),
            test_cdf: dist.test_probs.as_deref().map(build_cdf),
            label_slot,
            gold_pos,
        });
    }
    Ok(CompiledQuery {
        n_labels: labels.len(),
        gold_slot: q.gold.as_ref().map(|_| 0),
        per_prompt,
    })
}

/// Disjoint train/test query index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitView {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitView {
    /// Every query on both sides; used when no held-out set is wanted.
    pub fn whole(env: &EnvironmentModel) -> Self {
        let all: Vec<usize> = (0..env.num_queries()).collect();
        Self {
            train: all.clone(),
            test: all,
        }
    }
}

/// Seeded 80/20 shuffle split (train gets the floor).
pub fn split(env: &EnvironmentModel, seed: u64) -> Result<SplitView> {
    let n = env.num_queries();
    if n < 5 {
        return Err(contract(format!("cannot split {n} queries (need at least 5)")));
    }
    let mut rng = Stream::new(seed).derive("split");
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        order.swap(i, j);
    }
    let n_train = n * 4 / 5;
    let test = order.split_off(n_train);
    Ok(SplitView { train: order, test })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_mv() -> EnvironmentModel {
        let prompts = vec![
            Prompt { id: "a".into(), cost: 0.1 },
            Prompt { id: "b".into(), cost: 0.2 },
        ];
        let contexts = vec![Context::new("low", vec![1.0], 0.0).unwrap()];
        let queries = (0..6)
            .map(|i| QueryModel {
                id: format!("q{i}"),
                gold: Some("A".into()),
                per_prompt: vec![
                    OutcomeDist::new(Support::Labels(vec!["A".into(), "B".into()]), vec![0.7, 0.3]),
                    OutcomeDist::new(Support::Labels(vec!["C".into()]), vec![1.0]),
                ],
            })
            .collect();
        EnvironmentModel::new("tiny", AggregatorKind::Mv, 4, vec![[0.0, 1.0]], prompts, contexts, queries).unwrap()
    }

    #[test]
    fn degenerate_distribution_repeats_outcome() {
        let env = tiny_mv();
        let mut rng = Stream::new(3);
        let rec = env.pull(Arm::new(1, 4), 0, &mut rng).unwrap();
        assert_eq!(rec.outcomes, vec![0, 0, 0, 0]);
        let outs = env.materialize(&rec);
        assert!(outs.iter().all(|o| o.value == OutcomeValue::Label("C".into()) && o.cost == 0.2));
        // Gold never voted for: zero credit.
        assert_eq!(env.mv_credit(0, 1, &rec.outcomes), 0.0);
    }

    #[test]
    fn pull_length_and_bounds() {
        let env = tiny_mv();
        let mut rng = Stream::new(1);
        for n in 1..=4 {
            assert_eq!(env.pull(Arm::new(0, n), 2, &mut rng).unwrap().outcomes.len(), n as usize);
        }
        assert!(env.pull(Arm::new(0, 5), 0, &mut rng).is_err());
        assert!(env.pull(Arm::new(0, 0), 0, &mut rng).is_err());
        assert!(env.pull(Arm::new(2, 1), 0, &mut rng).is_err());
        assert!(env.pull(Arm::new(0, 1), 6, &mut rng).is_err());
    }

    #[test]
    fn exact_utility_matches_aggregate_oracle() {
        let env = tiny_mv();
        let ctx = Context::new("c", vec![1.0], -0.5).unwrap();
        let v = env.exact_utility(&ctx, 0, 0, 3, Side::Train).unwrap();
        let credit = expected_mv_exact(&[0.7, 0.3], Some(0), 3).unwrap();
        assert!((v - (credit - 0.5 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let env = tiny_mv();
        let s = split(&env, 9).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4, 2));
        assert_eq!(s, split(&env, 9).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn validation_errors() {
        let base = tiny_mv();
        let mut queries = base.queries().to_vec();
        queries[2].per_prompt[0].probs = vec![0.5, 0.3];
        let err = EnvironmentModel::new(
            "bad",
            AggregatorKind::Mv,
            4,
            vec![[0.0, 1.0]],
            base.prompts().to_vec(),
            base.contexts().to_vec(),
            queries,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("prompt a") && msg.contains("query q2"), "{msg}");

        let mut queries = base.queries().to_vec();
        queries[0].gold = None;
        assert!(EnvironmentModel::new(
            "bad",
            AggregatorKind::Mv,
            4,
            vec![[0.0, 1.0]],
            base.prompts().to_vec(),
            base.contexts().to_vec(),
            queries,
        )
        .is_err());
    }
}
