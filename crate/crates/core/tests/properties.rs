mod common;

use balfusion::datagen::{generate, SyntheticSpec};
use balfusion::metrics::{average_precision, report_from_scores};
use balfusion::modulation::{
    discrepancy_ratio, ogm_coefficient, ogm_star_coefficient, opm_drop_prob, score_sums,
    ModulationConfig, RhoMeasure, ZFn,
};
use balfusion::nn::softmax_rows;
use balfusion::Matrix;
use common::{brute_force_ap, brute_force_metrics};
use proptest::prelude::*;

fn cfg(q_base: f64, lambda: f64, alpha: f64, z_fn: ZFn) -> ModulationConfig {
    ModulationConfig {
        q_base,
        lambda,
        alpha,
        z_fn,
        ..ModulationConfig::default()
    }
}

fn z_strategy() -> impl Strategy<Value = ZFn> {
    prop_oneof![Just(ZFn::TanhShifted), Just(ZFn::Sigmoid)]
}

proptest! {
    #[test]
    fn two_modality_ratios_are_reciprocal(a in 1e-6f64..1e3, b in 1e-6f64..1e3) {
        let r = discrepancy_ratio(&[a, b], RhoMeasure::Ratio);
        prop_assert!((r[0] * r[1] - 1.0).abs() < 1e-9);
        prop_assert_eq!(r[0] > 1.0, a > b);
    }

    #[test]
    fn differences_sum_to_zero(s in prop::collection::vec(0.0f64..100.0, 2..6)) {
        let r = discrepancy_ratio(&s, RhoMeasure::Difference);
        prop_assert!(r.iter().sum::<f64>().abs() < 1e-9 * s.len() as f64 * 100.0);
    }

    #[test]
    fn drop_probability_is_bounded_and_monotone(
        rho in prop::collection::vec(0.0f64..10.0, 1..5),
        q_base in 0.0f64..1.0,
        lambda in 0.01f64..5.0,
        z in z_strategy(),
    ) {
        let c = cfg(q_base, lambda, 1.0, z);
        let q = opm_drop_prob(&rho, &c);
        let bumped: Vec<f64> = rho.iter().map(|r| r + 0.25).collect();
        let q2 = opm_drop_prob(&bumped, &c);
        for (i, (&a, &b)) in q.iter().zip(&q2).enumerate() {
            prop_assert!((0.0..=1.0).contains(&a));
            if rho[i] > 1.0 {
                prop_assert!(b >= a);
            } else {
                prop_assert_eq!(a, 0.0);
            }
        }
    }

    #[test]
    fn coefficients_are_bounded_and_monotone(
        rho in prop::collection::vec(0.0f64..10.0, 1..5),
        alpha in 0.0f64..3.0,
        z in z_strategy(),
    ) {
        let c = cfg(0.5, 0.5, alpha, z);
        let k = ogm_coefficient(&rho, &c);
        let bumped: Vec<f64> = rho.iter().map(|r| r + 0.25).collect();
        let k2 = ogm_coefficient(&bumped, &c);
        for (i, (&a, &b)) in k.iter().zip(&k2).enumerate() {
            prop_assert!((0.0..=1.0).contains(&a));
            if rho[i] > 1.0 {
                prop_assert!(b <= a);
            } else {
                prop_assert_eq!(a, 1.0);
            }
        }
    }

    #[test]
    fn ogm_star_never_slows_anyone(
        rho in prop::collection::vec(0.0f64..10.0, 1..5),
        alpha in 0.0f64..3.0,
        z in z_strategy(),
    ) {
        let k = ogm_star_coefficient(&rho, &cfg(0.5, 0.5, alpha, z));
        for (i, &v) in k.iter().enumerate() {
            prop_assert!(v >= 1.0);
            if rho[i] > 1.0 {
                prop_assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-50.0f64..50.0, 12),
    ) {
        let p = softmax_rows(&Matrix::from_vec(3, 4, vals).unwrap());
        for i in 0..3 {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_sums_lie_in_the_batch_range(
        vals in prop::collection::vec(-5.0f64..5.0, 2 * 5 * 3),
        labels in prop::collection::vec(0usize..3, 5),
    ) {
        let comps = vec![
            Matrix::from_vec(5, 3, vals[..15].to_vec()).unwrap(),
            Matrix::from_vec(5, 3, vals[15..].to_vec()).unwrap(),
        ];
        for s in score_sums(&comps, &labels).unwrap() {
            prop_assert!(s > 0.0 && s < 5.0);
        }
    }

    #[test]
    fn average_precision_matches_enumeration(
        scores in prop::collection::vec(0u8..6, 1..30),
        seed in any::<u64>(),
    ) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 5.0).collect();
        let positive: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let a = average_precision(&scores, &positive);
        let b = brute_force_ap(&scores, &positive);
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn reports_match_the_count_based_reference(
        vals in prop::collection::vec(0u8..4, 2 * 20),
        labels in prop::collection::vec(0usize..2, 20),
    ) {
        let scores = Matrix::from_vec(20, 2, vals.iter().map(|&v| v as f64).collect()).unwrap();
        let r = report_from_scores(&scores, &labels).unwrap();
        let (acc, map, f1) = brute_force_metrics(&scores, &labels);
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
        prop_assert!((r.map - map).abs() < 1e-9);
        prop_assert!((r.f1.unwrap() - f1.unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_deterministic_and_balanced(
        seed in any::<u64>(),
        classes in 2usize..6,
        n_train in 1usize..60,
    ) {
        let spec = SyntheticSpec {
            classes,
            dims: vec![3, 2],
            separation: vec![2.0, 0.5],
            noise_std: vec![1.0, 1.0],
            n_train,
            n_test: 7,
            seed,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        let mut counts = vec![0usize; classes];
        for &y in &a.train.labels {
            counts[y] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(a.train.len(), n_train);
        prop_assert_eq!(a.test.len(), 7);
    }
}
