use iapo::aggregate::{argmax_set, expected_bon_exact, expected_mv_exact, vote_credit};
use iapo::env::split;
use iapo::env::synth::{gen_bernoulli_env, BernoulliParams};
use iapo::learner::{
    allocate, halve_context, run_baseline, run_psst, ActiveFlags, ArmSpace, BaselineSpec, PsstOptions, QTable,
};
use iapo::stats::{adjust_pvalues, pairwise_matrix, AlgorithmSample, Correction, PairedTest};
use iapo::Stream;
use proptest::prelude::*;

fn probs(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1u32..100, len).prop_map(|w| {
        let total: u32 = w.iter().sum();
        w.iter().map(|&x| x as f64 / total as f64).collect()
    })
}

fn dyadic_table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4, 2usize..20).prop_flat_map(|(c, k)| {
        prop::collection::vec(prop::collection::vec((0u32..16).prop_map(|v| v as f64 / 16.0), k), c)
    })
}

proptest! {
    #[test]
    fn affine_transform_keeps_argmax_and_survivors(
        table in dyadic_table(),
        a_exp in -4i32..5,
        b in -64i32..64,
    ) {
        let a = 2f64.powi(a_exp);
        let b = b as f64 / 16.0;
        let moved: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|q| a * q + b).collect()).collect();
        let space = ArmSpace::new(table[0].len(), vec![1]).unwrap();
        let (q1, q2) = (QTable::from_means(&table), QTable::from_means(&moved));
        let mut f1 = ActiveFlags::all(table.len(), space.len());
        let mut f2 = f1.clone();
        for c in 0..table.len() {
            prop_assert_eq!(argmax_set(&table[c]), argmax_set(&moved[c]));
            halve_context(&space, &mut f1, &q1, c);
            halve_context(&space, &mut f2, &q2, c);
            prop_assert_eq!(f1.active_arms(c), f2.active_arms(c));
        }
    }

    #[test]
    fn halving_keeps_floor_half(k in 1usize..40, seed in any::<u64>()) {
        let space = ArmSpace::new(k, vec![1]).unwrap();
        let mut rng = Stream::new(seed);
        let means: Vec<Vec<f64>> = vec![(0..k).map(|_| rng.unit()).collect()];
        let q = QTable::from_means(&means);
        let mut flags = ActiveFlags::all(1, k);
        halve_context(&space, &mut flags, &q, 0);
        let kept = flags.active_arms(0);
        prop_assert_eq!(kept.len(), if k == 1 { 1 } else { k / 2 });
        let worst_kept = kept.iter().map(|&a| means[0][a]).fold(f64::INFINITY, f64::min);
        for a in (0..k).filter(|a| !kept.contains(a)) {
            prop_assert!(means[0][a] <= worst_kept);
        }
    }

    #[test]
    fn allocation_never_exceeds_round_budget(p in 1usize..8, n_r in 1u64..5000, drop in any::<u64>()) {
        let space = ArmSpace::new(p, vec![1, 2, 4, 8]).unwrap();
        let mut flags = ActiveFlags::all(2, space.len());
        for a in 0..space.len() {
            if (drop >> (a % 64)) & 1 == 1 && flags.count(0) > 1 {
                flags.set(0, a, false);
            }
        }
        if let Ok(alloc) = allocate(&space, &flags, n_r) {
            prop_assert!(alloc.completions() <= n_r);
            prop_assert!(n_r - alloc.completions() < alloc.unit_cost);
            prop_assert_eq!(alloc.pulls_per_arm, n_r / alloc.unit_cost);
        }
    }

    #[test]
    fn holm_and_bh_are_monotone_and_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        for method in [Correction::Holm, Correction::Bh] {
            let adj = adjust_pvalues(&p, method);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in order.windows(2) {
                prop_assert!(adj[w[0]] <= adj[w[1]]);
            }
            for (raw, a) in p.iter().zip(&adj) {
                prop_assert!(a >= raw && *a <= 1.0);
            }
        }
        let holm = adjust_pvalues(&p, Correction::Holm);
        let bh = adjust_pvalues(&p, Correction::Bh);
        for (h, b) in holm.iter().zip(&bh) {
            prop_assert!(b <= h);
        }
    }

    #[test]
    fn win_matrix_is_antisymmetric(
        shifts in prop::collection::vec(-0.2f64..0.2, 2..5),
        noise in prop::collection::vec(0.0f64..1.0, 40),
    ) {
        let samples: Vec<AlgorithmSample> = shifts
            .iter()
            .enumerate()
            .map(|(i, s)| AlgorithmSample {
                algorithm: format!("a{i}"),
                runs: (0..10u64).map(|r| (r, noise[(r as usize * 3 + i) % 40] + s)).collect(),
            })
            .collect();
        for test in [PairedTest::Wilcoxon, PairedTest::Sign] {
            let out = pairwise_matrix(&samples, 0.05, test, Correction::Holm).unwrap();
            for i in 0..shifts.len() {
                prop_assert_eq!(out.matrix[i][i], 0);
                for j in 0..shifts.len() {
                    prop_assert_eq!(out.matrix[i][j], -out.matrix[j][i]);
                }
            }
        }
    }

    #[test]
    fn bon_oracle_nondecreasing_in_n(
        dist in probs(1..=6),
        values in prop::collection::vec(-1.0f64..1.0, 6),
        n in 1u32..40,
    ) {
        let v = &values[..dist.len()];
        let a = expected_bon_exact(v, &dist, n, 0.0, 0.0).unwrap();
        let b = expected_bon_exact(v, &dist, n + 1, 0.0, 0.0).unwrap();
        prop_assert!(b >= a - 1e-12);
        let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(b <= top + 1e-12);
    }

    #[test]
    fn mv_oracle_is_a_probability_and_credits_sum_to_one(dist in probs(1..=4), n in 1u32..12) {
        let total: f64 = (0..dist.len()).map(|g| expected_mv_exact(&dist, Some(g), n).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for g in 0..dist.len() {
            let v = expected_mv_exact(&dist, Some(g), n).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn vote_credit_splits_ties(counts in prop::collection::vec(0u32..5, 1..6)) {
        let total: f64 = (0..counts.len()).map(|g| vote_credit(&counts, Some(g))).sum();
        if counts.iter().any(|&c| c > 0) {
            prop_assert!((total - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(total, 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn learners_never_overspend(budget in 200u64..4000, seed in any::<u64>()) {
        let env = gen_bernoulli_env(3, &BernoulliParams { num_prompts: 4, num_queries: 26, n_max: 8, ..Default::default() }).unwrap();
        let s = split(&env, seed).unwrap();
        let space = ArmSpace::powers_of_two(&env);
        let rng = Stream::new(seed);
        if let Ok(out) = run_psst(&env, &s, &space, budget, PsstOptions::default(), &rng) {
            prop_assert!(out.ledger.consumed <= budget);
            let sum: u64 = out.ledger.rounds.iter().map(|r| r.consumed).sum();
            prop_assert_eq!(sum, out.ledger.consumed);
        }
        for spec in [BaselineSpec::Uniform, BaselineSpec::Ucb { c: 0.1 }, BaselineSpec::TripleNRandom] {
            if let Ok(out) = run_baseline(spec, &env, &s, &space, budget, &rng) {
                prop_assert!(out.ledger.consumed <= budget);
            }
        }
    }
}
