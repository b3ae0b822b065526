use gramood_core::{auroc, detection_accuracy, evaluate, tnr_at_95tpr};
use proptest::prelude::*;

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn brute_dtacc(id: &[f64], ood: &[f64]) -> f64 {
    let mut taus: Vec<f64> = id.iter().chain(ood).copied().collect();
    taus.push(f64::NEG_INFINITY);
    taus.iter()
        .map(|&t| {
            let tpr = id.iter().filter(|&&v| v <= t).count() as f64 / id.len() as f64;
            let tnr = ood.iter().filter(|&&v| v > t).count() as f64 / ood.len() as f64;
            0.5 * tpr + 0.5 * tnr
        })
        .fold(0.0, f64::max)
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-5.0f64..5.0, 1..300),
        prop::collection::vec((-8i32..8).prop_map(f64::from), 1..300),
    ]
}

fn int_scores() -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-60i64..60, 1..200)
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_count(id in scores(), ood in scores()) {
        let fast = auroc(&id, &ood).unwrap();
        prop_assert!((fast - brute_auroc(&id, &ood)).abs() <= 1e-12);
    }

    #[test]
    fn dtacc_matches_exhaustive_sweep(id in scores(), ood in scores()) {
        let fast = detection_accuracy(&id, &ood).unwrap();
        prop_assert!((fast - brute_dtacc(&id, &ood)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_invariant_under_monotone_maps(id in int_scores(), ood in int_scores()) {
        let lin = |v: &[i64]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let cubic = |v: &[i64]| v.iter().map(|&x| (x * x * x + 7 * x) as f64).collect::<Vec<_>>();
        let a = evaluate(&lin(&id), &lin(&ood)).unwrap();
        let b = evaluate(&cubic(&id), &cubic(&ood)).unwrap();
        prop_assert_eq!(a.auroc, b.auroc);
        prop_assert_eq!(a.tnr_at_95tpr, b.tnr_at_95tpr);
        prop_assert_eq!(a.detection_accuracy, b.detection_accuracy);
    }

    #[test]
    fn dtacc_symmetric_under_role_swap(id in scores(), ood in scores()) {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let a = detection_accuracy(&id, &ood).unwrap();
        let b = detection_accuracy(&neg(&ood), &neg(&id)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn auroc_complements_under_role_swap(id in scores(), ood in scores()) {
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval(id in scores(), ood in scores()) {
        for m in [tnr_at_95tpr(&id, &ood).unwrap(), auroc(&id, &ood).unwrap(), detection_accuracy(&id, &ood).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        prop_assert!(detection_accuracy(&id, &ood).unwrap() >= 0.5);
    }
}
