use oodsynth_core::datagen::{
    gen_gaussian_ring, gen_held_out_classes, gen_id_splits, gen_ood_test, load_csv,
    load_points_csv, ring_center, save_csv, save_points_csv, HeldOutLayout, OodKind, OodParams,
    RingParams, Split,
};
use proptest::prelude::*;

fn ring(num_classes: usize, n_per_class: usize) -> RingParams {
    RingParams {
        num_classes,
        n_per_class,
        radius: 4.0,
        sigma: 0.35,
    }
}

fn ood_params(seen: Vec<usize>) -> OodParams {
    OodParams {
        num_classes: 8,
        radius: 4.0,
        between_sigma: 0.35,
        far_ring_halfwidth: 0.25,
        held_out: HeldOutLayout {
            total_classes: 8,
            seen,
            radius: 4.0,
            sigma: 0.35,
        },
    }
}

fn dist(p: &[f64], c: [f64; 2]) -> f64 {
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_a_function_of_the_seed(seed in any::<u64>(), c in 2usize..10, n in 1usize..30) {
        let p = ring(c, n);
        let (a, va) = gen_id_splits(seed, &p, 3).unwrap();
        let (b, vb) = gen_id_splits(seed, &p, 3).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&va, &vb);
        prop_assert_eq!(a.len(), c * n);
        prop_assert_eq!(va.len(), c * 3);
        prop_assert_eq!(a.num_classes(), c);
        for k in 0..c {
            prop_assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), n);
        }
        for kind in OodKind::ALL {
            let x = gen_ood_test(kind, seed, 20, &ood_params(vec![0, 2, 4, 6])).unwrap();
            let y = gen_ood_test(kind, seed, 20, &ood_params(vec![0, 2, 4, 6])).unwrap();
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn held_out_points_sit_on_unseen_classes(seed in any::<u64>(), mask in 1u8..255) {
        let seen: Vec<usize> = (0..8).filter(|i| mask & (1 << i) != 0).collect();
        let layout = ood_params(seen.clone()).held_out;
        let (pts, labels) = gen_held_out_classes(seed, 200, &layout).unwrap();
        let (mut own, mut other) = (0.0, 0.0);
        for (p, &l) in pts.iter_rows().zip(&labels) {
            prop_assert!(!seen.contains(&l));
            own += dist(p, ring_center(l as f64, 8, 4.0));
            other += seen
                .iter()
                .map(|&s| dist(p, ring_center(s as f64, 8, 4.0)))
                .fold(f64::INFINITY, f64::min);
        }
        prop_assert!(own < other);
    }

    #[test]
    fn far_ring_radius_stays_in_band(seed in any::<u64>(), w in 0.0f64..1.0) {
        let params = OodParams { far_ring_halfwidth: w, ..ood_params(vec![]) };
        let set = gen_ood_test(OodKind::FarRing, seed, 100, &params).unwrap();
        for p in set.points.iter_rows() {
            let r = dist(p, [0.0, 0.0]);
            prop_assert!(r >= 8.0 - w - 1e-12 && r <= 8.0 + w + 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), n in 1usize..20) {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_gaussian_ring(seed, &ring(3, n), Split::Val).unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&data, &path).unwrap();
        prop_assert_eq!(load_csv(&path, Split::Val).unwrap(), data.clone());
        let ppath = dir.path().join("p.csv");
        save_points_csv(&data.points, &ppath).unwrap();
        prop_assert_eq!(load_points_csv(&ppath).unwrap(), data.points);
    }
}

#[test]
fn between_modes_points_straddle_neighbouring_classes() {
    let set = gen_ood_test(OodKind::BetweenModes, 5, 400, &ood_params(vec![])).unwrap();
    let mut mid = 0.0;
    let mut near = 0.0;
    for p in set.points.iter_rows() {
        let nearest = |offset: f64| {
            (0..8)
                .map(|c| dist(p, ring_center(c as f64 + offset, 8, 4.0)))
                .fold(f64::INFINITY, f64::min)
        };
        mid += nearest(0.5);
        near += nearest(0.0);
    }
    assert!(mid < near);
}

#[test]
fn malformed_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "x1,x2,label\n1.0,2.0,0\n1.0,nan,1\n").unwrap();
    assert!(load_csv(&path, Split::Train).is_err());
    std::fs::write(&path, "x1,x2,label\n1.0,2.0\n").unwrap();
    assert!(load_csv(&path, Split::Train).is_err());
    std::fs::write(&path, "x1,x2,label\n1.0,2.0,-1\n").unwrap();
    assert!(load_csv(&path, Split::Train).is_err());
}

#[test]
fn invalid_geometry_is_rejected() {
    assert!(gen_gaussian_ring(0, &ring(1, 5), Split::Train).is_err());
    let all_seen = ood_params((0..8).collect()).held_out;
    assert!(gen_held_out_classes(0, 10, &all_seen).is_err());
    assert!(gen_ood_test(OodKind::FarRing, 0, 0, &ood_params(vec![])).is_err());
}

#[test]
fn held_out_ring_lies_farther_from_id_centers_than_id_points() {
    let id = gen_id_splits(9, &ring(8, 100), 100).unwrap().1;
    let layout = HeldOutLayout {
        total_classes: 8,
        seen: vec![],
        radius: 3.0,
        sigma: 0.35,
    };
    let (pts, _) = gen_held_out_classes(10, 800, &layout).unwrap();
    let id_own: f64 = id
        .points
        .iter_rows()
        .zip(&id.labels)
        .map(|(p, &l)| dist(p, ring_center(l as f64, 8, 4.0)))
        .sum::<f64>()
        / id.len() as f64;
    let held: f64 = pts
        .iter_rows()
        .map(|p| {
            (0..8)
                .map(|c| dist(p, ring_center(c as f64, 8, 4.0)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / pts.rows() as f64;
    assert!(held > id_own, "{held} vs {id_own}");
}
