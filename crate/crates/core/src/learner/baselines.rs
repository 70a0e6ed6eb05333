//! Comparison learners: uniform allocation, three sequential bandits and two
//! restricted halving variants.

use serde::{Deserialize, Serialize};

use super::psst::{halve_context, run_psst, PsstOptions};
use super::{
    infeasible, sample_query, ActiveFlags, ArmSpace, BlockScorer, BudgetLedger, Deployment, LearnOutcome, Policy,
    QTable,
};
use crate::env::{EnvironmentModel, SplitView};
use crate::error::{contract, Result};
use crate::rng::Stream;

pub const DEFAULT_EPSILON: f64 = 0.15;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_UCB_C: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    Uniform,
    EpsGreedy { epsilon: f64 },
    Softmax { temperature: f64 },
    Ucb { c: f64 },
    /// Halving over prompts at a single completion.
    TripleN1,
    /// Halving over prompts with a random scale per pull.
    TripleNRandom,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineSpec::EpsGreedy { epsilon } if !(epsilon > 0.0 && epsilon < 1.0) => {
                Err(contract(format!("epsilon {epsilon} outside (0, 1)")))
            }
            BaselineSpec::Softmax { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(contract(format!("temperature {temperature} must be positive")))
            }
            BaselineSpec::Ucb { c } if !(c >= 0.0 && c.is_finite()) => {
                Err(contract(format!("exploration constant {c} must be non-negative")))
            }
            _ => Ok(()),
        }
    }
}

pub fn run_baseline(
    spec: BaselineSpec,
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    rng: &Stream,
) -> Result<LearnOutcome> {
    spec.validate()?;
    match spec {
        BaselineSpec::Uniform => run_uniform(env, split, space, budget, rng),
        BaselineSpec::EpsGreedy { epsilon } => {
            run_sequential(env, split, space, budget, rng, Chooser::EpsGreedy { epsilon })
        }
        BaselineSpec::Softmax { temperature } => {
            run_sequential(env, split, space, budget, rng, Chooser::Softmax { temperature })
        }
        BaselineSpec::Ucb { c } => run_sequential(env, split, space, budget, rng, Chooser::Ucb { c }),
        BaselineSpec::TripleN1 => {
            let single = ArmSpace::new(env.num_prompts(), vec![1])?;
            run_psst(env, split, &single, budget, PsstOptions::default(), rng)
        }
        BaselineSpec::TripleNRandom => run_random_scale(env, split, space, budget, rng),
    }
}

/// Per-context argmax among sampled arms; arm 0 where nothing was sampled.
fn greedy_policy(space: &ArmSpace, q: &QTable) -> Policy {
    let deployments = (0..q.n_contexts())
        .map(|c| {
            let a = q.best(c, 0..space.len(), |a| space.tie_key(a)).unwrap_or(0);
            Deployment::fixed(space.arm(a))
        })
        .collect();
    Policy {
        deployments,
        scales: space.scales().to_vec(),
    }
}

/// Equal pulls per arm: full sweeps, then one extra pull for arms in a
/// shuffled order while the remainder covers them.
fn run_uniform(
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    rng: &Stream,
) -> Result<LearnOutcome> {
    let sweep: u64 = space.scales().iter().map(|&s| u64::from(s)).sum::<u64>() * space.n_prompts() as u64;
    if budget < sweep {
        return Err(infeasible(budget, sweep, "one pull of every arm"));
    }
    let mut rng = rng.clone();
    let sweeps = budget / sweep;
    let mut left = budget - sweeps * sweep;
    let mut order: Vec<usize> = (0..space.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.index(i + 1);
        order.swap(i, j);
    }
    let mut extra = Vec::new();
    for a in order {
        let n = u64::from(space.arm(a).scale);
        if n <= left {
            left -= n;
            extra.push(a);
        }
    }
    let mut ledger = BudgetLedger::new(budget);
    let mut q = QTable::new(env.num_contexts(), space.len());
    let mut scorer = BlockScorer::new(env, space);
    let mut pulls = 0u64;
    let schedule = (0..sweeps).flat_map(|_| 0..space.len()).chain(extra);
    for a in schedule {
        let arm = space.arm(a);
        let x = sample_query(split, &mut rng)?;
        let rec = env.pull(arm, x, &mut rng)?;
        ledger.charge(u64::from(arm.scale))?;
        scorer.accumulate(&rec, None, false, &mut q);
        pulls += 1;
    }
    let consumed = ledger.consumed;
    ledger.close_round("uniform", budget, consumed, pulls);
    Ok(LearnOutcome {
        policy: greedy_policy(space, &q),
        ledger,
        q,
        space: space.clone(),
    })
}

/// Exploration index `mean + c * sqrt(ln t / n)`.
pub fn ucb_index(mean: f64, n: u64, t: u64, c: f64) -> f64 {
    mean + c * ((t as f64).ln() / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Chooser {
    EpsGreedy { epsilon: f64 },
    Softmax { temperature: f64 },
    Ucb { c: f64 },
}

impl Chooser {
    pub(crate) fn choose(&self, space: &ArmSpace, q: &QTable, context: usize, t: u64, rng: &mut Stream) -> usize {
        let n_arms = space.len();
        match *self {
            Chooser::EpsGreedy { epsilon } => {
                if rng.unit() < epsilon {
                    return rng.index(n_arms);
                }
                q.best(context, 0..n_arms, |a| space.tie_key(a))
                    .unwrap_or_else(|| rng.index(n_arms))
            }
            Chooser::Softmax { temperature } => {
                let means: Vec<Option<f64>> = (0..n_arms).map(|a| q.mean(context, a)).collect();
                let (lo, hi) = means
                    .iter()
                    .flatten()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &m| (l.min(m), h.max(m)));
                let weights: Vec<f64> = means
                    .iter()
                    .map(|m| {
                        let v = match *m {
                            Some(m) if hi > lo => (m - lo) / (hi - lo),
                            _ => 0.5,
                        };
                        ((v - 1.0) / temperature).exp()
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.unit() * total;
                for (a, w) in weights.iter().enumerate() {
                    if u < *w {
                        return a;
                    }
                    u -= w;
                }
                n_arms - 1
            }
            Chooser::Ucb { c } => {
                let unpulled = (0..n_arms)
                    .filter(|&a| q.count(context, a) == 0)
                    .min_by_key(|&a| space.tie_key(a));
                if let Some(a) = unpulled {
                    return a;
                }
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for a in 0..n_arms {
                    let n = q.count(context, a);
                    let v = ucb_index(q.mean(context, a).unwrap_or(0.0), n, t.max(1), c);
                    if v > best_v || (v == best_v && space.tie_key(a) < space.tie_key(best)) {
                        best = a;
                        best_v = v;
                    }
                }
                best
            }
        }
    }
}

/// One pull at a time: draw a context, choose an arm for it, score the pull
/// under every context. Stops once the chosen arm no longer fits the budget.
fn run_sequential(
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    rng: &Stream,
    chooser: Chooser,
) -> Result<LearnOutcome> {
    let mut rng = rng.clone();
    let mut ledger = BudgetLedger::new(budget);
    let mut q = QTable::new(env.num_contexts(), space.len());
    let mut scorer = BlockScorer::new(env, space);
    let mut t = 0u64;
    loop {
        let c = rng.index(env.num_contexts());
        let a = chooser.choose(space, &q, c, t, &mut rng);
        let arm = space.arm(a);
        if u64::from(arm.scale) > ledger.remaining() {
            break;
        }
        let x = sample_query(split, &mut rng)?;
        let rec = env.pull(arm, x, &mut rng)?;
        ledger.charge(u64::from(arm.scale))?;
        scorer.accumulate(&rec, None, false, &mut q);
        t += 1;
    }
    let consumed = ledger.consumed;
    ledger.close_round("sequential", budget, consumed, t);
    Ok(LearnOutcome {
        policy: greedy_policy(space, &q),
        ledger,
        q,
        space: space.clone(),
    })
}

/// Prompt-level halving; every pull uses a scale drawn uniformly from the
/// scale set and the learned policy keeps drawing scales at deployment.
fn run_random_scale(
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    rng: &Stream,
) -> Result<LearnOutcome> {
    let n_prompts = env.num_prompts();
    let prompts = ArmSpace::new(n_prompts, vec![1])?;
    let mut flags = ActiveFlags::all(env.num_contexts(), n_prompts);
    let rounds = if n_prompts <= 1 {
        0
    } else {
        u64::from(usize::BITS - (n_prompts - 1).leading_zeros())
    };
    let mut ledger = BudgetLedger::new(budget);
    let mut q = QTable::new(env.num_contexts(), n_prompts);
    if rounds > 0 && budget < rounds {
        return Err(infeasible(budget, rounds, "one completion per halving round"));
    }
    let n_r = if rounds > 0 { budget / rounds } else { 0 };
    let mut utils = vec![0.0; env.num_contexts()];
    for r in 0..rounds {
        let mut rng = rng.derive_u64(r);
        let active: Vec<usize> = flags
            .union()
            .iter()
            .enumerate()
            .filter(|(_, &u)| u)
            .map(|(p, _)| p)
            .collect();
        let (mut spent, mut pulls) = (0u64, 0u64);
        'round: loop {
            for &p in &active {
                let n = space.scales()[rng.index(space.scales().len())];
                if spent + u64::from(n) > n_r {
                    break 'round;
                }
                let x = sample_query(split, &mut rng)?;
                let rec = env.pull(crate::aggregate::Arm::new(p, n), x, &mut rng)?;
                for (u, ctx) in utils.iter_mut().zip(env.contexts()) {
                    *u = env.record_utility(ctx, &rec);
                }
                for (c, &u) in utils.iter().enumerate() {
                    if flags.is_active(c, p) {
                        q.add(c, p, u);
                    }
                }
                spent += u64::from(n);
                pulls += 1;
            }
        }
        ledger.charge(spent)?;
        ledger.close_round(format!("round {}", r + 1), n_r, spent, pulls);
        for c in 0..env.num_contexts() {
            halve_context(&prompts, &mut flags, &q, c);
        }
    }
    let deployments = (0..env.num_contexts())
        .map(|c| {
            let active = flags.active_arms(c);
            let p = q
                .best(c, active.iter().copied(), |a| a)
                .or_else(|| active.first().copied())
                .unwrap_or(0);
            Deployment::RandomScale { prompt: p }
        })
        .collect();
    Ok(LearnOutcome {
        policy: Policy {
            deployments,
            scales: space.scales().to_vec(),
        },
        ledger,
        q,
        space: prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{Arm, Context};
    use crate::env::{AggregatorKind, OutcomeDist, Prompt, QueryModel, Support};
    use crate::error::Error;

    fn two_prompt_mv() -> EnvironmentModel {
        let prompts = vec![
            Prompt { id: "sure".into(), cost: 1.0 },
            Prompt { id: "coin".into(), cost: 1.0 },
        ];
        let contexts = vec![Context::new("costly", vec![1.0], -0.5).unwrap()];
        let labels = || Support::Labels(vec!["1".into(), "0".into()]);
        let queries = (0..10)
            .map(|i| QueryModel {
                id: format!("q{i}"),
                gold: Some("1".into()),
                per_prompt: vec![
                    OutcomeDist::new(labels(), vec![1.0, 0.0]),
                    OutcomeDist::new(labels(), vec![0.5, 0.5]),
                ],
            })
            .collect();
        EnvironmentModel::new("toy", AggregatorKind::Mv, 4, vec![[0.0, 1.0]], prompts, contexts, queries).unwrap()
    }

    #[test]
    fn ucb_index_value() {
        let v = ucb_index(0.5, 4, 100, 0.1);
        assert!((v - 0.6072983013144674).abs() < 1e-12);
    }

    #[test]
    fn uniform_counts_differ_by_at_most_one() {
        let env = two_prompt_mv();
        let space = ArmSpace::new(2, vec![1, 2]).unwrap();
        for budget in [6, 7, 10, 23] {
            let out = run_baseline(BaselineSpec::Uniform, &env, &SplitView::whole(&env), &space, budget, &Stream::new(2))
                .unwrap();
            let counts: Vec<u64> = (0..space.len()).map(|a| out.q.count(0, a)).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
            assert!(out.ledger.consumed <= budget);
        }
        assert!(matches!(
            run_baseline(BaselineSpec::Uniform, &env, &SplitView::whole(&env), &space, 5, &Stream::new(2)),
            Err(Error::InfeasibleBudget { minimal: 6, .. })
        ));
    }

    #[test]
    fn uniform_recovers_dominant_arm() {
        let env = two_prompt_mv();
        let space = ArmSpace::new(2, vec![1, 2]).unwrap();
        for seed in 0..20 {
            let out = run_baseline(BaselineSpec::Uniform, &env, &SplitView::whole(&env), &space, 60, &Stream::new(seed))
                .unwrap();
            assert_eq!(out.policy.get(0), Deployment::fixed(Arm::new(0, 1)));
        }
    }

    #[test]
    fn sequential_learners_stay_in_budget() {
        let env = two_prompt_mv();
        let space = ArmSpace::new(2, vec![1, 2, 4]).unwrap();
        let specs = [
            BaselineSpec::EpsGreedy { epsilon: DEFAULT_EPSILON },
            BaselineSpec::Softmax { temperature: DEFAULT_TEMPERATURE },
            BaselineSpec::Ucb { c: DEFAULT_UCB_C },
            BaselineSpec::TripleN1,
            BaselineSpec::TripleNRandom,
        ];
        for spec in specs {
            for budget in [9, 50, 301] {
                let out = run_baseline(spec, &env, &SplitView::whole(&env), &space, budget, &Stream::new(4)).unwrap();
                assert!(out.ledger.consumed <= budget, "{spec:?}");
            }
        }
    }

    #[test]
    fn ucb_pulls_unpulled_in_scale_then_prompt_order() {
        let space = ArmSpace::new(2, vec![1, 2]).unwrap();
        let mut q = QTable::new(1, 4);
        let mut rng = Stream::new(0);
        let ucb = Chooser::Ucb { c: 0.1 };
        let mut seen = Vec::new();
        for t in 0..4 {
            let a = ucb.choose(&space, &q, 0, t, &mut rng);
            seen.push(space.arm(a));
            q.add(0, a, 0.0);
        }
        assert_eq!(seen, vec![Arm::new(0, 1), Arm::new(1, 1), Arm::new(0, 2), Arm::new(1, 2)]);
    }

    #[test]
    fn full_exploration_is_uniform_over_arms() {
        let space = ArmSpace::new(3, vec![1, 2]).unwrap();
        let q = QTable::from_means(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let mut rng = Stream::new(11);
        let mut hits = [0u32; 6];
        let draws = 60_000;
        for _ in 0..draws {
            hits[Chooser::EpsGreedy { epsilon: 1.0 }.choose(&space, &q, 0, 0, &mut rng)] += 1;
        }
        for h in hits {
            let frac = f64::from(h) / f64::from(draws);
            assert!((frac - 1.0 / 6.0).abs() < 0.01, "{hits:?}");
        }
    }

    #[test]
    fn softmax_prefers_the_leader() {
        let space = ArmSpace::new(2, vec![1]).unwrap();
        let q = QTable::from_means(&[vec![1.0, 0.0]]);
        let mut rng = Stream::new(3);
        let lead = (0..1000)
            .filter(|_| Chooser::Softmax { temperature: 0.05 }.choose(&space, &q, 0, 0, &mut rng) == 0)
            .count();
        assert!(lead > 990);
    }

    #[test]
    fn parameter_validation() {
        assert!(BaselineSpec::EpsGreedy { epsilon: 1.0 }.validate().is_err());
        assert!(BaselineSpec::Softmax { temperature: 0.0 }.validate().is_err());
        assert!(BaselineSpec::Ucb { c: -1.0 }.validate().is_err());
        assert!(BaselineSpec::Ucb { c: 0.0 }.validate().is_ok());
    }

    #[test]
    fn random_scale_policy_keeps_scale_random() {
        let env = two_prompt_mv();
        let space = ArmSpace::new(2, vec![1, 2]).unwrap();
        let out =
            run_baseline(BaselineSpec::TripleNRandom, &env, &SplitView::whole(&env), &space, 40, &Stream::new(1)).unwrap();
        assert_eq!(out.policy.get(0), Deployment::RandomScale { prompt: 0 });
        assert_eq!(out.policy.scales, vec![1, 2]);
    }
}
