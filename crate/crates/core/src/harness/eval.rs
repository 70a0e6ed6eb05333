//! Average contextual return of a deployed policy on the held-out queries.

use std::collections::HashMap;

use super::config::EvalMode;
use crate::aggregate::Arm;
use crate::env::{AggregatorKind, EnvironmentModel, Side, SplitView};
use crate::error::{contract, Result};
use crate::learner::{Deployment, Policy};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcrEstimate {
    pub mean: f64,
    /// Standard error of the mean; zero in exact mode.
    pub sem: f64,
}

/// Mean utility over uniformly weighted contexts and test queries.
///
/// Sampled mode draws `num_samples` (context, test query) pairs and pulls the
/// deployed arm on the test distribution; exact mode averages the closed-form
/// expected utility over every pair.
pub fn evaluate_acr(
    policy: &Policy,
    env: &EnvironmentModel,
    split: &SplitView,
    mode: EvalMode,
    num_samples: usize,
    rng: &Stream,
) -> Result<AcrEstimate> {
    if split.test.is_empty() {
        return Err(contract("empty test split"));
    }
    if policy.deployments.len() != env.num_contexts() {
        return Err(contract(format!(
            "policy covers {} contexts, environment has {}",
            policy.deployments.len(),
            env.num_contexts()
        )));
    }
    if policy.scales.is_empty() {
        return Err(contract("policy has an empty scale set"));
    }
    match mode {
        EvalMode::Sampled => sampled(policy, env, split, num_samples, rng),
        EvalMode::Exact => exact(policy, env, split).map(|mean| AcrEstimate { mean, sem: 0.0 }),
    }
}

fn sampled(
    policy: &Policy,
    env: &EnvironmentModel,
    split: &SplitView,
    num_samples: usize,
    rng: &Stream,
) -> Result<AcrEstimate> {
    if num_samples == 0 {
        return Err(contract("num_samples must be positive"));
    }
    let mut rng = rng.clone();
    let mut values = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let c = rng.index(env.num_contexts());
        let x = split.test[rng.index(split.test.len())];
        let arm = match policy.get(c) {
            Deployment::Fixed { prompt, scale } => Arm::new(prompt, scale),
            Deployment::RandomScale { prompt } => Arm::new(prompt, policy.scales[rng.index(policy.scales.len())]),
        };
        let rec = env.pull_from(Side::Test, arm, x, &mut rng)?;
        values.push(env.record_utility(&env.contexts()[c], &rec));
    }
    Ok(mean_sem(&values))
}

fn exact(policy: &Policy, env: &EnvironmentModel, split: &SplitView) -> Result<f64> {
    let mut credits: HashMap<(usize, usize, u32), f64> = HashMap::new();
    let mut total = 0.0;
    for (c, ctx) in env.contexts().iter().enumerate() {
        let scales: Vec<(usize, u32)> = match policy.get(c) {
            Deployment::Fixed { prompt, scale } => vec![(prompt, scale)],
            Deployment::RandomScale { prompt } => policy.scales.iter().map(|&n| (prompt, n)).collect(),
        };
        let mut ctx_sum = 0.0;
        for &x in &split.test {
            let mut per_query = 0.0;
            for &(p, n) in &scales {
                per_query += match env.aggregator() {
                    AggregatorKind::Mv => {
                        let credit = match credits.get(&(x, p, n)) {
                            Some(&v) => v,
                            None => {
                                let v = env.exact_mv_credit(x, p, n, Side::Test)?;
                                credits.insert((x, p, n), v);
                                v
                            }
                        };
                        ctx.task_weights[0] * credit + ctx.cost_weight * env.prompt_cost(p) * f64::from(n)
                    }
                    AggregatorKind::Bon => env.exact_utility(ctx, x, p, n, Side::Test)?,
                };
            }
            ctx_sum += per_query / scales.len() as f64;
        }
        total += ctx_sum / split.test.len() as f64;
    }
    Ok(total / env.num_contexts() as f64)
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_sem(values: &[f64]) -> AcrEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sem = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    AcrEstimate { mean, sem }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::synth::{gen_categorical_env, CategoricalParams};
    use crate::env::tests::tiny_mv;
    use crate::env::split;

    fn fixed(env: &EnvironmentModel, prompt: usize, scale: u32) -> Policy {
        Policy {
            deployments: vec![Deployment::Fixed { prompt, scale }; env.num_contexts()],
            scales: vec![1, 2, 3, 4],
        }
    }

    #[test]
    fn sampled_tracks_exact_within_four_sem() {
        let env = tiny_mv();
        let s = SplitView::whole(&env);
        let p = fixed(&env, 0, 3);
        let ex = evaluate_acr(&p, &env, &s, EvalMode::Exact, 0, &Stream::new(0)).unwrap();
        let sm = evaluate_acr(&p, &env, &s, EvalMode::Sampled, 10_000, &Stream::new(1)).unwrap();
        assert!((ex.mean - sm.mean).abs() < 4.0 * sm.sem, "{ex:?} {sm:?}");

        let env = gen_categorical_env(
            4,
            &CategoricalParams {
                num_prompts: 3,
                num_queries: 20,
                n_max: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let s = split(&env, 2).unwrap();
        let p = fixed(&env, 1, 5);
        let ex = evaluate_acr(&p, &env, &s, EvalMode::Exact, 0, &Stream::new(0)).unwrap();
        let sm = evaluate_acr(&p, &env, &s, EvalMode::Sampled, 20_000, &Stream::new(1)).unwrap();
        assert!((ex.mean - sm.mean).abs() < 4.0 * sm.sem, "{ex:?} {sm:?}");
    }

    #[test]
    fn degenerate_prompt_has_constant_return() {
        // Prompt 1 of the tiny env always answers a wrong label at cost 0.2; the
        // single context has zero cost weight, so every pull scores 0.
        let env = tiny_mv();
        let s = SplitView::whole(&env);
        let p = fixed(&env, 1, 2);
        for mode in [EvalMode::Exact, EvalMode::Sampled] {
            let r = evaluate_acr(&p, &env, &s, mode, 500, &Stream::new(3)).unwrap();
            assert_eq!(r.mean, 0.0);
            assert_eq!(r.sem, 0.0);
        }
    }

    #[test]
    fn random_scale_averages_over_scale_set() {
        let env = tiny_mv();
        let s = SplitView::whole(&env);
        let random = Policy {
            deployments: vec![Deployment::RandomScale { prompt: 0 }],
            scales: vec![1, 3],
        };
        let r = evaluate_acr(&random, &env, &s, EvalMode::Exact, 0, &Stream::new(0)).unwrap();
        let one = evaluate_acr(&fixed(&env, 0, 1), &env, &s, EvalMode::Exact, 0, &Stream::new(0)).unwrap();
        let three = evaluate_acr(&fixed(&env, 0, 3), &env, &s, EvalMode::Exact, 0, &Stream::new(0)).unwrap();
        assert!((r.mean - (one.mean + three.mean) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sem_shrinks_with_sample_count() {
        let env = tiny_mv();
        let s = SplitView::whole(&env);
        let p = fixed(&env, 0, 2);
        let small = evaluate_acr(&p, &env, &s, EvalMode::Sampled, 1_000, &Stream::new(5)).unwrap();
        let large = evaluate_acr(&p, &env, &s, EvalMode::Sampled, 10_000, &Stream::new(5)).unwrap();
        let ratio = small.sem / large.sem;
        assert!((ratio - 10f64.sqrt()).abs() < 0.5, "{ratio}");
    }

    #[test]
    fn rejects_empty_test_split() {
        let env = tiny_mv();
        let s = SplitView {
            train: vec![0],
            test: vec![],
        };
        assert!(evaluate_acr(&fixed(&env, 0, 1), &env, &s, EvalMode::Exact, 0, &Stream::new(0)).is_err());
    }
}
