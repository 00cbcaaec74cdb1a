mod common;

use common::{rel_err, same_relu_pattern, FD_STEP};
use oodsynth_core::numcore::{DenseMatrix, Rng};
use oodsynth_core::scores::{
    build_bank, energy, energy_and_grad, energy_upstream, grad_knn_wrt_input, knn_distance,
    normalize_rows, Classifier, ClassifierArch, EmbeddingBank,
};
use proptest::prelude::*;

fn classifier(seed: u64) -> Classifier {
    let arch = ClassifierArch {
        hidden: 16,
        embed_dim: 8,
        num_classes: 4,
        ..ClassifierArch::default()
    };
    let mut rng = Rng::new(seed);
    let mut clf = Classifier::init(&arch, &mut rng).unwrap();
    for layer in clf.net_mut().layers_mut() {
        for b in layer.bias.iter_mut() {
            *b = 0.2 + 0.2 * rng.normal();
        }
    }
    clf
}

fn point(x: [f64; 2]) -> DenseMatrix {
    DenseMatrix::new(1, 2, x.to_vec()).unwrap()
}

fn kth_neighbor_index(clf: &Classifier, bank: &EmbeddingBank, x: [f64; 2]) -> Option<usize> {
    let pass = clf.forward(&point(x)).ok()?;
    let (z, _) = normalize_rows(clf.embedding(&pass)).ok()?;
    Some(bank.kth_neighbor(z.row(0)).1)
}

fn bank_points(rng: &mut Rng, n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, 2, |_, _| 2.0 * rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn energy_shift_identity(logits in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        prop_assert!((energy(&shifted) - (energy(&logits) - c)).abs() <= 1e-12 * (1.0 + c.abs() + energy(&logits).abs()));
    }

    #[test]
    fn energy_upstream_rows_sum_to_minus_one(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..10) {
        let mut rng = Rng::new(seed);
        let logits = DenseMatrix::from_fn(rows, cols, |_, _| 20.0 * rng.normal());
        let up = energy_upstream(&logits);
        for r in 0..rows {
            prop_assert!((up.row(r).iter().sum::<f64>() + 1.0).abs() <= 1e-12);
            prop_assert!(up.row(r).iter().all(|v| *v <= 0.0));
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences(seed in any::<u64>(), x0 in -4.0f64..4.0, x1 in -4.0f64..4.0) {
        let clf = classifier(seed);
        let x = [x0, x1];
        let (_, g) = energy_and_grad(&clf, &point(x)).unwrap();
        let mut fd = [0.0; 2];
        for i in 0..2 {
            let (mut hi, mut lo) = (x, x);
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            prop_assume!(same_relu_pattern(clf.net(), &hi, &lo) && same_relu_pattern(clf.net(), &hi, &x));
            let e = |p: [f64; 2]| energy(clf.logits(&point(p)).unwrap().row(0));
            fd[i] = (e(hi) - e(lo)) / (2.0 * FD_STEP);
        }
        prop_assert!(rel_err(g.as_slice(), &fd) <= 1e-4);
    }

    #[test]
    fn knn_distance_is_bounded_and_monotone_in_k(seed in any::<u64>(), x0 in -4.0f64..4.0, x1 in -4.0f64..4.0) {
        let clf = classifier(seed);
        let mut rng = Rng::new(seed ^ 1);
        let pts = bank_points(&mut rng, 30);
        let bank = build_bank(&clf, &pts, 1);
        prop_assume!(bank.is_ok());
        let bank = bank.unwrap();
        let x = point([x0, x1]);
        prop_assume!(knn_distance(&bank, &clf, &x).is_ok());
        let pass = clf.forward(&x).unwrap();
        let (z, _) = normalize_rows(clf.embedding(&pass)).unwrap();
        let mut sorted: Vec<f64> = bank
            .vectors()
            .iter_rows()
            .map(|b| b.iter().zip(z.row(0)).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
            .collect();
        sorted.sort_by(f64::total_cmp);
        let mut prev = 0.0;
        for k in 1..=bank.len() {
            let d = knn_distance(&bank.with_k(k).unwrap(), &clf, &x).unwrap()[0];
            prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
            prop_assert!(d >= prev);
            prop_assert!((d - sorted[k - 1]).abs() <= 1e-12);
            prev = d;
        }
    }

    #[test]
    fn knn_gradient_matches_finite_differences_and_ascends(seed in any::<u64>(), x0 in -4.0f64..4.0, x1 in -4.0f64..4.0, k in 1usize..6) {
        let clf = classifier(seed);
        let mut rng = Rng::new(seed ^ 2);
        let bank = build_bank(&clf, &bank_points(&mut rng, 40), k);
        prop_assume!(bank.is_ok());
        let bank = bank.unwrap();
        let x = [x0, x1];
        let nb = kth_neighbor_index(&clf, &bank, x);
        prop_assume!(nb.is_some());
        let g = grad_knn_wrt_input(&clf, &bank, &point(x));
        prop_assume!(g.is_ok());
        let g = g.unwrap();
        let d = |p: [f64; 2]| knn_distance(&bank, &clf, &point(p)).unwrap()[0];
        let mut fd = [0.0; 2];
        for i in 0..2 {
            let (mut hi, mut lo) = (x, x);
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            prop_assume!(same_relu_pattern(clf.net(), &hi, &lo) && same_relu_pattern(clf.net(), &hi, &x));
            prop_assume!(kth_neighbor_index(&clf, &bank, hi) == nb && kth_neighbor_index(&clf, &bank, lo) == nb);
            fd[i] = (d(hi) - d(lo)) / (2.0 * FD_STEP);
        }
        prop_assert!(rel_err(g.as_slice(), &fd) <= 1e-3);

        let norm = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-8);
        let tau = 1e-6;
        let probe = [x[0] + tau * g.get(0, 0) / norm, x[1] + tau * g.get(0, 1) / norm];
        prop_assume!(kth_neighbor_index(&clf, &bank, probe) == nb && same_relu_pattern(clf.net(), &probe, &x));
        prop_assert!(d(probe) > d(x));
    }

    #[test]
    fn bank_is_deterministic_and_unit_norm(seed in any::<u64>()) {
        let clf = classifier(seed);
        let mut rng = Rng::new(seed ^ 3);
        let pts = bank_points(&mut rng, 25);
        let a = build_bank(&clf, &pts, 3);
        prop_assume!(a.is_ok());
        let a = a.unwrap();
        prop_assert_eq!(&a, &build_bank(&clf, &pts, 3).unwrap());
        for row in a.vectors().iter_rows() {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(build_bank(&clf, &pts, 25).is_ok());
        prop_assert!(build_bank(&clf, &pts, 26).is_err());
    }
}

#[test]
fn embedding_without_input_dependence_has_zero_knn_gradient() {
    let mut clf = classifier(9);
    let embed = clf.embed_layer();
    let layer = &mut clf.net_mut().layers_mut()[embed];
    layer.weight = DenseMatrix::zeros(layer.in_dim(), layer.out_dim());
    layer.bias = (0..layer.out_dim()).map(|j| 1.0 + j as f64).collect();
    let mut rng = Rng::new(1);
    let bank_vectors = DenseMatrix::from_fn(5, clf.embed_dim(), |_, _| rng.normal());
    let (bank_vectors, _) = normalize_rows(&bank_vectors).unwrap();
    let bank = EmbeddingBank::new(bank_vectors, 2).unwrap();
    let g = grad_knn_wrt_input(&clf, &bank, &point([0.3, -1.2])).unwrap();
    assert!(g.as_slice().iter().all(|v| *v == 0.0));
}
