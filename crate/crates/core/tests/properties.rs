use icl_lab::attention::{attention_profile, lift, reduce, token_attention, embed};
use icl_lab::features::{BasisMode, CountTable, FeatureBasis, Prompt, PromptCounts, TokenDistribution};
use icl_lab::gradient::{evaluate_table, per_count_integrands, per_count_loss};
use icl_lab::harness::detect_phases;
use icl_lab::trainer::{gd_run, StopRule, TrainConfig};
use icl_lab::{loss_report, Estimator, PhaseThresholds, ReducedWeights};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn weights(k: usize, scale: f64) -> impl Strategy<Value = ReducedWeights> {
    prop::collection::vec(-scale..scale, k * k)
        .prop_map(move |v| ReducedWeights::from_matrix(DMatrix::from_vec(k, k, v)).unwrap())
}

fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn case() -> impl Strategy<Value = (usize, ReducedWeights, Vec<u32>, usize)> {
    (2usize..=5).prop_flat_map(|k| {
        (
            Just(k),
            weights(k, 4.0),
            prop::collection::vec(0u32..12, k).prop_filter("nonempty", |c| c.iter().sum::<u32>() > 0),
            0..k,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diagonal_integrand_is_nonnegative((_k, m, counts, q) in case()) {
        let ig = per_count_integrands(&PromptCounts::new(counts).unwrap(), q, &m).unwrap();
        prop_assert!(ig.a >= 0.0);
    }

    #[test]
    fn population_alpha_is_nonnegative(p in probs(3), m in weights(3, 3.0), n in 1usize..12) {
        let dist = TokenDistribution::new(p, icl_lab::Regime::Custom).unwrap();
        let table = CountTable::exact(&dist, n, 100_000).unwrap();
        let g = evaluate_table(&table, &dist, &m, None).gradient;
        prop_assert!(g.alpha.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn profile_is_a_distribution((_k, m, counts, q) in case()) {
        let prof = attention_profile(&PromptCounts::new(counts.clone()).unwrap(), q, &m).unwrap();
        let total: f64 = prof.scores.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (s, c) in prof.scores.iter().zip(&counts) {
            prop_assert!(*s >= 0.0);
            prop_assert_eq!(*c == 0, *s == 0.0);
        }
    }

    #[test]
    fn loss_depends_only_on_counts((k, m, counts, q) in case(), seed in any::<u64>()) {
        // Any ordering of the same tokens gives the same per-token softmax loss.
        let mut tokens: Vec<usize> = counts.iter().enumerate()
            .flat_map(|(j, &c)| std::iter::repeat(j).take(c as usize)).collect();
        let basis = FeatureBasis::identity(k);
        let q_mat = lift(&m, &basis);
        let mut state = seed;
        for i in (1..tokens.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            tokens.swap(i, (state >> 33) as usize % (i + 1));
        }
        let prompt = Prompt::new(tokens.clone(), q, None).unwrap();
        let mut with_task = prompt.clone();
        with_task.task = Some(nalgebra::DVector::zeros(k));
        let attn = token_attention(&embed(&with_task, &basis).unwrap(), &q_mat).unwrap();
        let mut per_feature = vec![0.0; k];
        for (a, &t) in attn.iter().zip(&tokens) {
            per_feature[t] += a;
        }
        let direct: f64 = 0.5 * (0..k).map(|j| {
            let target = if j == q { 1.0 } else { 0.0 };
            (per_feature[j] - target).powi(2)
        }).sum::<f64>();
        let from_counts = per_count_loss(&PromptCounts::new(counts).unwrap(), q, &m).unwrap();
        prop_assert!((direct - from_counts).abs() < 1e-12);
    }

    #[test]
    fn feature_relabeling_permutes_gradient(m in weights(3, 2.0), n in 1usize..10, shift in 1usize..3) {
        let p = vec![0.5, 0.3, 0.2];
        let perm: Vec<usize> = (0..3).map(|i| (i + shift) % 3).collect();
        let mut pp = vec![0.0; 3];
        for i in 0..3 {
            pp[perm[i]] = p[i];
        }
        let d1 = TokenDistribution::new(p, icl_lab::Regime::Custom).unwrap();
        let d2 = TokenDistribution::new(pp, icl_lab::Regime::Custom).unwrap();
        let m2 = ReducedWeights::from_matrix(DMatrix::from_fn(3, 3, |i, j| {
            let inv = |x: usize| perm.iter().position(|&y| y == x).unwrap();
            m.matrix()[(inv(i), inv(j))]
        })).unwrap();
        let g1 = evaluate_table(&CountTable::exact(&d1, n, 10_000).unwrap(), &d1, &m, None).gradient.ascent_matrix();
        let g2 = evaluate_table(&CountTable::exact(&d2, n, 10_000).unwrap(), &d2, &m2, None).gradient.ascent_matrix();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((g1[(i, j)] - g2[(perm[i], perm[j])]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn reduce_inverts_lift_for_any_basis(m in weights(3, 5.0), seed in any::<u64>(), d in 3usize..7) {
        let basis = FeatureBasis::build(d, 3, seed, BasisMode::RandomOrthonormal).unwrap();
        prop_assert!(basis.orthonormality_error() < 1e-12);
        let back = reduce(&lift(&m, &basis), &basis);
        prop_assert!((back.matrix() - m.matrix()).amax() < 1e-12);
    }

    #[test]
    fn profile_is_shift_invariant_and_stable((_k, m, counts, q) in case(), shift in -700.0f64..700.0) {
        let counts = PromptCounts::new(counts).unwrap();
        let mut shifted = m.clone();
        for j in 0..shifted.num_features() {
            shifted.matrix_mut()[(j, q)] += shift;
        }
        let a = attention_profile(&counts, q, &m).unwrap();
        let b = attention_profile(&counts, q, &shifted).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!(x.is_finite());
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_bound_never_exceeds_loss(p in probs(3), m in weights(3, 4.0), n in 1usize..16) {
        let dist = TokenDistribution::new(p, icl_lab::Regime::Custom).unwrap();
        let rep = loss_report(&dist, n, &m, 1.0).unwrap();
        let lower = rep.lower_per_feature.unwrap();
        for j in 0..3 {
            prop_assert!(lower[j] <= rep.per_feature[j] + 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn detector_is_deterministic(eta in 0.5f64..4.0, n in 8usize..24) {
        let dist = TokenDistribution::balanced(3).unwrap();
        let mut cfg = TrainConfig::new(dist.clone(), n, eta, 60);
        cfg.estimator = Estimator::Exact;
        cfg.stop = StopRule::Never;
        let rec = gd_run(&cfg).unwrap();
        let th = PhaseThresholds { c: Some(0.5), ..Default::default() };
        let a = detect_phases(&rec, &dist, &th).unwrap();
        let b = detect_phases(&rec, &dist, &th).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        // A_k never decreases along the run.
        for w in rec.snapshots.windows(2) {
            for j in 0..3 {
                prop_assert!(w[1].weights.a(j) >= w[0].weights.a(j));
            }
        }
    }
}
