//! Prompt-and-scale successive halving, with an optional top-K prompt screen.

use super::{
    infeasible, sample_query, ActiveFlags, ArmSpace, BlockScorer, BudgetLedger, Deployment, LearnOutcome, Policy,
    QTable,
};
use crate::env::{EnvironmentModel, PullRecord, SplitView};
use crate::error::{contract, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsstOptions {
    /// Keep samples across rounds instead of re-estimating from scratch.
    pub stockpiling: bool,
}

impl Default for PsstOptions {
    fn default() -> Self {
        Self { stockpiling: true }
    }
}

/// Pulls for one round: every listed arm is pulled `pulls_per_arm` times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    /// Arm indices (maximal scale per prompt among union-active arms).
    pub arms: Vec<usize>,
    pub pulls_per_arm: u64,
    /// Completions for a single pull of every listed arm.
    pub unit_cost: u64,
}

impl Allocation {
    pub fn completions(&self) -> u64 {
        self.pulls_per_arm * self.unit_cost
    }
}

/// Largest active scale per prompt over the union of active arms.
fn maximal_arms(space: &ArmSpace, flags: &ActiveFlags) -> Vec<usize> {
    let union = flags.union();
    let k = space.scales().len();
    (0..space.n_prompts())
        .filter_map(|p| (0..k).rev().map(|j| space.index_of(p, j)).find(|&a| union[a]))
        .collect()
}

fn unit_cost(space: &ArmSpace, arms: &[usize]) -> u64 {
    arms.iter().map(|&a| u64::from(space.arm(a).scale)).sum()
}

/// Splits a round budget `n_r` across the maximal arms of each active prompt.
pub fn allocate(space: &ArmSpace, flags: &ActiveFlags, n_r: u64) -> Result<Allocation> {
    let arms = maximal_arms(space, flags);
    let m = unit_cost(space, &arms);
    if m == 0 {
        return Err(contract("no active arms to allocate"));
    }
    let pulls = n_r / m;
    if pulls == 0 {
        return Err(infeasible(n_r, m, "round budget below one pull per maximal arm"));
    }
    Ok(Allocation {
        arms,
        pulls_per_arm: pulls,
        unit_cost: m,
    })
}

/// Consecutive non-overlapping blocks of `target` outcomes; leftovers dropped.
pub fn partition_blocks(record: &PullRecord, target: u32) -> Result<Vec<&[u16]>> {
    if target == 0 || target as usize > record.outcomes.len() {
        return Err(contract(format!(
            "cannot cut blocks of {target} from a pull of {}",
            record.outcomes.len()
        )));
    }
    Ok(record.outcomes.chunks_exact(target as usize).collect())
}

/// Q estimates from `records` for every active (context, arm), with block reuse.
pub fn estimate_q(env: &EnvironmentModel, space: &ArmSpace, records: &[PullRecord], flags: &ActiveFlags) -> QTable {
    let mut q = QTable::new(env.num_contexts(), space.len());
    let mut scorer = BlockScorer::new(env, space);
    for r in records {
        scorer.accumulate(r, Some(flags), true, &mut q);
    }
    q
}

/// Drops the worst `ceil(k/2)` of the `k` active arms of `context` (none if
/// `k <= 1`). Ranking: sampled arms by mean descending, then unsampled arms;
/// ties by smaller scale, then smaller prompt.
pub fn halve_context(space: &ArmSpace, flags: &mut ActiveFlags, q: &QTable, context: usize) {
    let mut active = flags.active_arms(context);
    let k = active.len();
    if k <= 1 {
        return;
    }
    active.sort_by(|&a, &b| {
        let (ma, mb) = (q.mean(context, a), q.mean(context, b));
        match (ma, mb) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| space.tie_key(a).cmp(&space.tie_key(b)))
    });
    let keep = k - k.div_ceil(2);
    for &a in &active[keep..] {
        flags.set(context, a, false);
    }
}

fn rounds_needed(flags: &ActiveFlags) -> u32 {
    let widest = (0..flags.n_contexts()).map(|c| flags.count(c)).max().unwrap_or(0);
    if widest <= 1 {
        0
    } else {
        usize::BITS - (widest - 1).leading_zeros()
    }
}

/// Successive halving over `flags` with budget `budget`, charging `ledger`.
/// `seed_records` are scored before the first round when stockpiling.
#[allow(clippy::too_many_arguments)]
fn halving_rounds(
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    mut flags: ActiveFlags,
    budget: u64,
    opts: PsstOptions,
    rng: &Stream,
    seed_records: &[PullRecord],
    ledger: &mut BudgetLedger,
) -> Result<(ActiveFlags, QTable)> {
    let rounds = rounds_needed(&flags);
    let mut q = QTable::new(env.num_contexts(), space.len());
    let mut scorer = BlockScorer::new(env, space);
    if opts.stockpiling {
        for r in seed_records {
            scorer.accumulate(r, Some(&flags), true, &mut q);
        }
    }
    if rounds == 0 {
        return Ok((flags, q));
    }
    let minimal = u64::from(rounds) * unit_cost(space, &maximal_arms(space, &flags));
    if budget < minimal {
        return Err(infeasible(
            budget,
            minimal,
            format!("{rounds} halving rounds need one pull of every maximal arm each"),
        ));
    }
    let n_r = budget / u64::from(rounds);
    for r in 0..rounds {
        let alloc = allocate(space, &flags, n_r)?;
        let mut round_rng = rng.derive_u64(u64::from(r));
        let mut records = Vec::with_capacity(alloc.arms.len() * alloc.pulls_per_arm as usize);
        for &a in &alloc.arms {
            for _ in 0..alloc.pulls_per_arm {
                let x = sample_query(split, &mut round_rng)?;
                records.push(env.pull(space.arm(a), x, &mut round_rng)?);
            }
        }
        ledger.charge(alloc.completions())?;
        ledger.close_round(format!("round {}", r + 1), n_r, alloc.completions(), records.len() as u64);
        if let Some(last) = ledger.rounds.last_mut() {
            last.unit_cost = alloc.unit_cost;
        }
        if !opts.stockpiling {
            q.reset();
        }
        for rec in &records {
            scorer.accumulate(rec, Some(&flags), true, &mut q);
        }
        for c in 0..env.num_contexts() {
            halve_context(space, &mut flags, &q, c);
        }
    }
    Ok((flags, q))
}

fn surviving_policy(space: &ArmSpace, flags: &ActiveFlags, q: &QTable) -> Policy {
    let deployments = (0..flags.n_contexts())
        .map(|c| {
            let active = flags.active_arms(c);
            let a = q
                .best(c, active.iter().copied(), |a| space.tie_key(a))
                .or_else(|| active.first().copied())
                .unwrap_or(0);
            Deployment::fixed(space.arm(a))
        })
        .collect();
    Policy {
        deployments,
        scales: space.scales().to_vec(),
    }
}

/// Runs prompt-and-scale successive halving on the full arm space.
pub fn run_psst(
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    opts: PsstOptions,
    rng: &Stream,
) -> Result<LearnOutcome> {
    let flags = ActiveFlags::all(env.num_contexts(), space.len());
    let mut ledger = BudgetLedger::new(budget);
    let (flags, q) = halving_rounds(env, split, space, flags, budget, opts, &rng.derive("rounds"), &[], &mut ledger)?;
    Ok(LearnOutcome {
        policy: surviving_policy(space, &flags, &q),
        ledger,
        q,
        space: space.clone(),
    })
}

/// Output of the single-completion prompt screen.
#[derive(Debug, Clone)]
pub struct Screening {
    /// Retained prompt ids per context, best first.
    pub retained: Vec<Vec<usize>>,
    /// Per-(context, prompt) means from single-completion pulls.
    pub q: QTable,
    pub records: Vec<PullRecord>,
    pub consumed: u64,
    pub pulls_per_prompt: u64,
}

/// Spends `floor(rho * budget)` on scale-1 pulls spread evenly over prompts
/// and keeps the `k` best prompts per context (ties: smaller prompt id).
pub fn topk_screen(
    env: &EnvironmentModel,
    split: &SplitView,
    budget: u64,
    rho: f64,
    k: usize,
    rng: &Stream,
) -> Result<Screening> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(contract(format!("screening fraction {rho} outside (0, 1)")));
    }
    let n_prompts = env.num_prompts();
    if k == 0 || k > n_prompts {
        return Err(contract(format!("top-K of {k} with {n_prompts} prompts")));
    }
    let t0 = (rho * budget as f64).floor() as u64;
    let per_prompt = t0 / n_prompts as u64;
    if per_prompt == 0 {
        return Err(infeasible(
            budget,
            (n_prompts as f64 / rho).ceil() as u64,
            "screening budget below one pull per prompt",
        ));
    }
    let prompt_space = ArmSpace::new(n_prompts, vec![1])?;
    let mut rng = rng.clone();
    let mut records = Vec::with_capacity(n_prompts * per_prompt as usize);
    for p in 0..n_prompts {
        for _ in 0..per_prompt {
            let x = sample_query(split, &mut rng)?;
            records.push(env.pull(crate::aggregate::Arm::new(p, 1), x, &mut rng)?);
        }
    }
    let mut q = QTable::new(env.num_contexts(), n_prompts);
    let mut scorer = BlockScorer::new(env, &prompt_space);
    for r in &records {
        scorer.accumulate(r, None, false, &mut q);
    }
    let retained = (0..env.num_contexts())
        .map(|c| {
            let mut order: Vec<usize> = (0..n_prompts).collect();
            order.sort_by(|&a, &b| {
                let ma = q.mean(c, a).unwrap_or(f64::NEG_INFINITY);
                let mb = q.mean(c, b).unwrap_or(f64::NEG_INFINITY);
                mb.total_cmp(&ma).then(a.cmp(&b))
            });
            order.truncate(k);
            order
        })
        .collect();
    Ok(Screening {
        retained,
        q,
        records,
        consumed: per_prompt * n_prompts as u64,
        pulls_per_prompt: per_prompt,
    })
}

/// Top-K screening followed by halving over the retained prompts × all scales.
pub fn run_psst_topk(
    env: &EnvironmentModel,
    split: &SplitView,
    space: &ArmSpace,
    budget: u64,
    rho: f64,
    k: usize,
    opts: PsstOptions,
    rng: &Stream,
) -> Result<LearnOutcome> {
    let screen = topk_screen(env, split, budget, rho, k, &rng.derive("screen"))?;
    let mut ledger = BudgetLedger::new(budget);
    ledger.charge(screen.consumed)?;
    ledger.close_round("screen", (rho * budget as f64).floor() as u64, screen.consumed, screen.records.len() as u64);
    let mut flags = ActiveFlags::none(env.num_contexts(), space.len());
    for (c, prompts) in screen.retained.iter().enumerate() {
        for &p in prompts {
            for j in 0..space.scales().len() {
                flags.set(c, space.index_of(p, j), true);
            }
        }
    }
    // Screening pulls are scale-1 samples of the retained arms.
    let seeds: &[PullRecord] = if space.scales()[0] == 1 { &screen.records } else { &[] };
    let remaining = budget - screen.consumed;
    let (flags, q) = halving_rounds(
        env,
        split,
        space,
        flags,
        remaining,
        opts,
        &rng.derive("rounds"),
        seeds,
        &mut ledger,
    )?;
    Ok(LearnOutcome {
        policy: surviving_policy(space, &flags, &q),
        ledger,
        q,
        space: space.clone(),
    })
}
