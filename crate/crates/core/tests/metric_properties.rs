use medkg::metrics::{auprc_sample_avg, auroc, entropy, f1_scores, recall_at_k, weighted_auroc, F1Variant};
use proptest::prelude::*;

fn binary_instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..50).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|x| f64::from(x) / 20.0).collect(), l)
        })
    })
}

fn multilabel_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    (1usize..10, 2usize..30).prop_flat_map(|(rows, width)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..10, width), rows),
            prop::collection::vec(prop::collection::vec(any::<bool>(), width), rows),
        )
            .prop_map(|(s, mut l)| {
                l[0][0] = true;
                (s.into_iter().map(|r| r.into_iter().map(|x| (f64::from(x) + 0.5) / 10.0).collect()).collect(), l)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_is_invariant_under_monotone_maps((s, l) in binary_instance()) {
        let a = auroc(&s, &l).unwrap();
        let mapped: Vec<f64> = s.iter().map(|x| (3.0 * x - 1.0).exp()).collect();
        prop_assert_eq!(a, auroc(&mapped, &l).unwrap());
        let flipped: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&flipped, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn recall_at_k_is_non_decreasing((s, l) in multilabel_instance()) {
        let width = s[0].len();
        let mut prev = 0.0;
        for k in 1..=width {
            let r = recall_at_k(&s, &l, k).unwrap().value;
            prop_assert!(r >= prev - 1e-15);
            prop_assert!(r <= 1.0 + 1e-15);
            prev = r;
        }
        prop_assert!((prev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multilabel_metrics_lie_in_unit_interval((s, l) in multilabel_instance(), t in 0.05f64..0.95) {
        let ap = auprc_sample_avg(&s, &l).unwrap();
        prop_assert!(ap.value > 0.0 && ap.value <= 1.0);
        prop_assert_eq!(ap.used + ap.excluded, s.len());
        for v in [F1Variant::Binary, F1Variant::SampleMacro, F1Variant::Weighted, F1Variant::InflatedWeighted] {
            let f = f1_scores(&s, &l, t, v).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_q(w in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let h = entropy(&p);
        prop_assert!(h >= -1e-15);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        let uniform = vec![1.0 / p.len() as f64; p.len()];
        prop_assert!((entropy(&uniform) - (p.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_auroc_of_perfect_scores_is_one(classes in prop::collection::vec(0usize..4, 2..40)) {
        prop_assume!(classes.iter().any(|&c| c != classes[0]));
        let scores: Vec<Vec<f64>> = classes.iter().map(|&c| (0..4).map(|j| if j == c { 0.9 } else { 0.1 }).collect()).collect();
        prop_assert_eq!(weighted_auroc(&scores, &classes).unwrap(), 1.0);
    }
}
