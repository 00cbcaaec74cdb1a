use oodsynth_core::evaldetect::{
    auroc, fpr_at_95_tpr, histogram, kl_hist, minmax_normalize, unified_score, unified_weight,
    union_bounds,
};
use proptest::prelude::*;

/// Trapezoidal area under the ROC traced by every distinct threshold.
fn trapezoid_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut th: Vec<f64> = id.iter().chain(ood).copied().collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (ni, no) = (id.len() as f64, ood.len() as f64);
    let (mut area, mut prev) = (0.0, (0.0, 0.0));
    for t in th {
        let fpr = id.iter().filter(|&&s| s >= t).count() as f64 / ni;
        let tpr = ood.iter().filter(|&&s| s >= t).count() as f64 / no;
        area += (fpr - prev.0) * (tpr + prev.1) / 2.0;
        prev = (fpr, tpr);
    }
    area
}

/// Coarse values so ties are common.
fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(|v| v as f64 * 0.25), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auroc_matches_trapezoid(id in scores(60), ood in scores(60)) {
        let a = auroc(&id, &ood).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - trapezoid_auroc(&id, &ood)).abs() <= 1e-12);
        let swapped = auroc(&ood, &id).unwrap();
        prop_assert!((a + swapped - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_transforms(id in scores(50), ood in scores(50), k in 0.1f64..5.0, b in -10.0f64..10.0) {
        let f = |v: &[f64]| v.iter().map(|&s| k * s + b + s.powi(3)).collect::<Vec<_>>();
        let (fi, fo) = (f(&id), f(&ood));
        prop_assert!((auroc(&id, &ood).unwrap() - auroc(&fi, &fo).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(fpr_at_95_tpr(&id, &ood).unwrap(), fpr_at_95_tpr(&fi, &fo).unwrap());
    }

    #[test]
    fn fpr_falls_as_ood_scores_rise(id in scores(50), ood in scores(50), delta in 0.0f64..5.0) {
        let shifted: Vec<f64> = ood.iter().map(|s| s + delta).collect();
        let before = fpr_at_95_tpr(&id, &ood).unwrap();
        let after = fpr_at_95_tpr(&id, &shifted).unwrap();
        prop_assert!((0.0..=1.0).contains(&before));
        prop_assert!(after <= before);
        prop_assert!(auroc(&id, &shifted).unwrap() >= auroc(&id, &ood).unwrap() - 1e-12);
    }

    #[test]
    fn fpr_threshold_keeps_95_percent_of_id(id in scores(200)) {
        let ood = id.clone();
        let fpr = fpr_at_95_tpr(&id, &ood).unwrap();
        prop_assert!(fpr >= 0.95);
    }

    #[test]
    fn unified_score_is_bounded_and_monotone(
        d in prop::collection::vec(0.0f64..=1.0, 1..30),
        bump in 0.0f64..1.0,
        kl in 0.0f64..50.0,
        a in 0.0f64..20.0,
    ) {
        let w = unified_weight(kl, a);
        prop_assert!((0.0..1.0 + 1e-15).contains(&w));
        prop_assert!(unified_weight(kl + 1.0, a) >= w);
        let e: Vec<f64> = d.iter().rev().copied().collect();
        let u = unified_score(&d, &e, w);
        let d2: Vec<f64> = d.iter().map(|v| (v + bump).min(1.0)).collect();
        let e2: Vec<f64> = e.iter().map(|v| (v + bump).min(1.0)).collect();
        let u2 = unified_score(&d2, &e2, w);
        for (x, y) in u.iter().zip(&u2) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!(y >= x);
        }
        prop_assert_eq!(unified_score(&d, &e, 0.0), e.clone());
        prop_assert_eq!(unified_score(&d, &e, 1.0), d.clone());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identical_samples(
        a in prop::collection::vec(-5.0f64..5.0, 1..200),
        b in prop::collection::vec(-5.0f64..5.0, 1..200),
        bins in 1usize..80,
    ) {
        prop_assert!(kl_hist(&a, &b, bins, 1e-6).unwrap() >= 0.0);
        prop_assert!(kl_hist(&a, &a, bins, 1e-6).unwrap() <= 1e-9);
        let h = histogram(&a, -5.0, 5.0, bins, 1e-6);
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(h.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn minmax_is_affine_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 2..40),
        b in prop::collection::vec(-10.0f64..10.0, 1..40),
        k in 0.01f64..100.0,
        shift in -100.0f64..100.0,
    ) {
        let (lo, hi) = union_bounds(&a, &b);
        prop_assume!(hi > lo);
        let n = minmax_normalize(&a, lo, hi);
        let t = |v: &[f64]| v.iter().map(|s| k * s + shift).collect::<Vec<_>>();
        let (ta, tb) = (t(&a), t(&b));
        let (tlo, thi) = union_bounds(&ta, &tb);
        let m = minmax_normalize(&ta, tlo, thi);
        prop_assert!(!n.degenerate);
        for (x, y) in n.values.iter().zip(&m.values) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_logit_shift_leaves_energy_metrics_unchanged(id in scores(40), ood in scores(40), c in -50.0f64..50.0) {
        // a common logit offset c moves every energy by −c
        let (si, so): (Vec<f64>, Vec<f64>) = (id.iter().map(|e| e - c).collect(), ood.iter().map(|e| e - c).collect());
        prop_assert!((auroc(&id, &ood).unwrap() - auroc(&si, &so).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(fpr_at_95_tpr(&id, &ood).unwrap(), fpr_at_95_tpr(&si, &so).unwrap());
    }
}

#[test]
fn degenerate_range_maps_to_one_half() {
    let n = minmax_normalize(&[3.0, 3.0], 3.0, 3.0);
    assert!(n.degenerate);
    assert_eq!(n.values, vec![0.5, 0.5]);
}

#[test]
fn hand_checked_metrics() {
    let id = [0.1, 0.2, 0.3, 0.4];
    let ood = [0.35, 0.5, 0.6];
    assert!((auroc(&id, &ood).unwrap() - 11.0 / 12.0).abs() < 1e-15);
    assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
    assert!((fpr_at_95_tpr(&id, &ood).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(auroc(&[], &ood).is_err() && fpr_at_95_tpr(&id, &[]).is_err());
}
