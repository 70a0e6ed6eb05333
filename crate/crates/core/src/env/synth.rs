//! Synthetic environment generators.
//!
//! Both generators are pure functions of their parameters and seed.

use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::{AggregatorKind, EnvironmentModel, OutcomeDist, Prompt, QueryModel, Support};
use crate::aggregate::Context;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Per-tier single-shot success ranges `[lo, hi]` for deceiving prompts
/// (easy, medium, hard).
pub const DECEIVING_RANGES: [[f64; 2]; 3] = [[0.85, 0.95], [0.70, 0.85], [0.10, 0.35]];
/// Success range for all-rounders, identical on every tier.
pub const ALL_ROUNDER_RANGE: [f64; 2] = [0.55, 0.70];
/// Per-query jitter around a prompt's skill, in units of the tier range.
pub const SKILL_JITTER: f64 = 0.15;
pub const BERNOULLI_COST_MEAN: f64 = 0.02;
pub const BERNOULLI_COST_VARIANCE: f64 = 0.005;
pub const BERNOULLI_COST_FLOOR: f64 = 0.001;
/// Cost weights of the low / mid / high budget contexts.
pub const MV_COST_WEIGHTS: [(&str, f64); 3] = [("low", 0.0), ("mid", -0.2), ("high", -1.0)];

pub const TIERS: [&str; 3] = ["easy", "medium", "hard"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernoulliParams {
    pub num_prompts: usize,
    pub num_queries: usize,
    pub n_max: u32,
    /// Share of prompts that follow the deceiving archetype.
    pub deceiving_fraction: f64,
}

impl Default for BernoulliParams {
    fn default() -> Self {
        Self {
            num_prompts: 32,
            num_queries: 520,
            n_max: 32,
            deceiving_fraction: 0.5,
        }
    }
}

/// Query counts per tier for proportions 6:4:3.
pub fn tier_sizes(num_queries: usize) -> [usize; 3] {
    let easy = num_queries * 6 / 13;
    let medium = num_queries * 4 / 13;
    [easy, medium, num_queries - easy - medium]
}

fn archetype_mask(n: usize, fraction: f64, rng: &mut Stream) -> Vec<bool> {
    let k = (n as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.index(i + 1));
    }
    let mut mask = vec![false; n];
    for &i in &order[..k.min(n)] {
        mask[i] = true;
    }
    mask
}

fn validate_sizes(num_prompts: usize, num_queries: usize, n_max: u32, fraction: f64) -> Result<()> {
    if num_prompts == 0 || num_queries < 3 || n_max == 0 {
        return Err(Error::Config(
            "generators need at least 1 prompt, 3 queries and n_max >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config("archetype fraction must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Majority-vote environment with easy/medium/hard query tiers, deceiving
/// prompts (strong on easy queries, weak on hard ones) and all-rounders.
///
/// Prompt ids end in `-deceiving` or `-allrounder`; query ids start with
/// their tier name.
pub fn gen_bernoulli_env(seed: u64, params: &BernoulliParams) -> Result<EnvironmentModel> {
    validate_sizes(
        params.num_prompts,
        params.num_queries,
        params.n_max,
        params.deceiving_fraction,
    )?;
    let root = Stream::new(seed).derive("synthetic-bernoulli");
    let deceiving = archetype_mask(
        params.num_prompts,
        params.deceiving_fraction,
        &mut root.derive("archetypes"),
    );

    let cost_law = Normal::new(BERNOULLI_COST_MEAN, BERNOULLI_COST_VARIANCE.sqrt()).expect("valid normal");
    let mut cost_rng = root.derive("costs");
    let mut skill_rng = root.derive("skills");
    let prompts: Vec<Prompt> = (0..params.num_prompts)
        .map(|p| {
            let cost = loop {
                let c: f64 = cost_law.sample(&mut cost_rng);
                if c >= BERNOULLI_COST_FLOOR {
                    break c;
                }
            };
            let kind = if deceiving[p] { "deceiving" } else { "allrounder" };
            Prompt {
                id: format!("p{p:02}-{kind}"),
                cost,
            }
        })
        .collect();
    let skills: Vec<f64> = (0..params.num_prompts).map(|_| skill_rng.unit()).collect();

    let sizes = tier_sizes(params.num_queries);
    let labels = || Support::Labels(vec!["1".to_string(), "0".to_string()]);
    let mut q_rng = root.derive("success");
    let mut queries = Vec::with_capacity(params.num_queries);
    for (tier, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let per_prompt = (0..params.num_prompts)
                .map(|p| {
                    let [lo, hi] = if deceiving[p] {
                        DECEIVING_RANGES[tier]
                    } else {
                        ALL_ROUNDER_RANGE
                    };
                    let pos = (skills[p] + q_rng.uniform(-SKILL_JITTER, SKILL_JITTER)).clamp(0.0, 1.0);
                    let q = lo + (hi - lo) * pos;
                    OutcomeDist::new(labels(), vec![q, 1.0 - q])
                })
                .collect();
            queries.push(QueryModel {
                id: format!("{}-{i:03}", TIERS[tier]),
                gold: Some("1".into()),
                per_prompt,
            });
        }
    }

    EnvironmentModel::new(
        "synthetic-bernoulli",
        AggregatorKind::Mv,
        params.n_max,
        vec![[0.0, 1.0]],
        prompts,
        mv_contexts(),
        queries,
    )
}

/// The three majority-vote contexts: unit task weight, cost weight 0, −0.2, −1.
pub fn mv_contexts() -> Vec<Context> {
    MV_COST_WEIGHTS
        .iter()
        .map(|&(id, w)| Context::new(id, vec![1.0], w).expect("tier context is valid"))
        .collect()
}

/// Objective grid `{-4, ..., 4}`.
pub const GRID_MAX: i32 = 4;
pub const CATEGORICAL_COST_RANGE: [f64; 2] = [0.02, 0.1];
pub const BON_COST_WEIGHTS: [(&str, f64); 3] = [("low", -0.1), ("mid", -0.5), ("high", -1.0)];
/// Support points whose base mass falls below this are dropped.
pub const SUPPORT_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoricalParams {
    pub num_prompts: usize,
    pub num_queries: usize,
    pub n_max: u32,
    /// Share of prompts following the high-mean / low-variance archetype.
    pub hmlv_fraction: f64,
    /// Log-scale standard deviation of the per-query multiplicative noise.
    pub query_noise: f64,
    /// Dirichlet concentration of the train-to-test perturbation.
    pub shift_concentration: f64,
}

impl Default for CategoricalParams {
    fn default() -> Self {
        Self {
            num_prompts: 32,
            num_queries: 512,
            n_max: 32,
            hmlv_fraction: 0.5,
            query_noise: 0.2,
            shift_concentration: 200.0,
        }
    }
}

/// The 27 Best-of-N contexts: `w_1 in {0.1..0.9}`, `w_2 = 1 - w_1`, three cost tiers.
pub fn bon_contexts() -> Vec<Context> {
    let mut out = Vec::with_capacity(27);
    for k in 1..=9 {
        let w1 = f64::from(k) / 10.0;
        let w2 = f64::from(10 - k) / 10.0;
        for &(tier, cw) in &BON_COST_WEIGHTS {
            out.push(Context::new(format!("w{k}-{tier}"), vec![w1, w2], cw).expect("grid context is valid"));
        }
    }
    out
}

/// Bi-objective Best-of-N environment over `{-4..4}^2` with two archetypes:
/// HMLV (high mean, low variance) and LMHV (lower mean, high variance), each
/// specialising in one objective.
pub fn gen_categorical_env(seed: u64, params: &CategoricalParams) -> Result<EnvironmentModel> {
    validate_sizes(params.num_prompts, params.num_queries, params.n_max, params.hmlv_fraction)?;
    if params.shift_concentration <= 0.0 || params.query_noise < 0.0 {
        return Err(Error::Config("shift_concentration must be > 0 and query_noise >= 0".into()));
    }
    let root = Stream::new(seed).derive("synthetic-categorical");
    let hmlv = archetype_mask(params.num_prompts, params.hmlv_fraction, &mut root.derive("archetypes"));

    let mut shape_rng = root.derive("shapes");
    let mut cost_rng = root.derive("costs");
    let grid: Vec<[f64; 2]> = (-GRID_MAX..=GRID_MAX)
        .flat_map(|a| (-GRID_MAX..=GRID_MAX).map(move |b| [f64::from(a), f64::from(b)]))
        .collect();

    let mut prompts = Vec::with_capacity(params.num_prompts);
    // Base distribution per prompt: (support rows, probabilities).
    let mut bases: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(params.num_prompts);
    for p in 0..params.num_prompts {
        let special = shape_rng.index(2);
        let (main, other, spread) = if hmlv[p] {
            (
                shape_rng.uniform(1.5, 2.5),
                shape_rng.uniform(-0.5, 0.5),
                shape_rng.uniform(0.5, 0.8),
            )
        } else {
            (
                shape_rng.uniform(0.0, 1.0),
                shape_rng.uniform(-1.0, 0.0),
                shape_rng.uniform(1.5, 2.2),
            )
        };
        let mut center = [other, other];
        center[special] = main;
        let weights: Vec<f64> = grid
            .iter()
            .map(|o| {
                let d2 = (o[0] - center[0]).powi(2) + (o[1] - center[1]).powi(2);
                (-d2 / (2.0 * spread * spread)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        for (o, w) in grid.iter().zip(&weights) {
            if w / total >= SUPPORT_CUTOFF {
                rows.extend_from_slice(o);
                probs.push(*w);
            }
        }
        normalize(&mut probs);
        bases.push((rows, probs));

        let kind = if hmlv[p] { "hmlv" } else { "lmhv" };
        prompts.push(Prompt {
            id: format!("p{p:02}-{kind}-o{}", special + 1),
            cost: cost_rng.uniform(CATEGORICAL_COST_RANGE[0], CATEGORICAL_COST_RANGE[1]),
        });
    }

    let noise = Normal::new(0.0, params.query_noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut noise_rng = root.derive("query-noise");
    let mut shift_rng = root.derive("test-shift");
    let mut queries = Vec::with_capacity(params.num_queries);
    for qi in 0..params.num_queries {
        let per_prompt = bases
            .iter()
            .map(|(rows, base)| {
                let mut probs: Vec<f64> = base
                    .iter()
                    .map(|b| {
                        let z: f64 = if params.query_noise > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                        b * z.exp()
                    })
                    .collect();
                normalize(&mut probs);
                let mut test: Vec<f64> = probs
                    .iter()
                    .map(|&p| {
                        Gamma::new(params.shift_concentration * p, 1.0)
                            .expect("positive shape")
                            .sample(&mut shift_rng)
                    })
                    .collect();
                normalize(&mut test);
                OutcomeDist {
                    support: Support::Vectors {
                        dim: 2,
                        values: rows.clone(),
                    },
                    probs,
                    test_probs: Some(test),
                }
            })
            .collect();
        queries.push(QueryModel {
            id: format!("x{qi:03}"),
            gold: None,
            per_prompt,
        });
    }

    let bound = f64::from(GRID_MAX);
    EnvironmentModel::new(
        "synthetic-categorical",
        AggregatorKind::Bon,
        params.n_max,
        vec![[-bound, bound], [-bound, bound]],
        prompts,
        bon_contexts(),
        queries,
    )
}

fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        for x in p.iter_mut() {
            *x /= s;
        }
    } else if let Some(first) = p.first_mut() {
        *first = 1.0;
    }
}
