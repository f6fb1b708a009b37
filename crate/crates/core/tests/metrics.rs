mod support;

use intentkg::annotation::{fleiss_kappa, pairwise_agreement};
use intentkg::population::{average_ranks, pr_curve, spearman};
use intentkg::receval::rmse_values;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{brute_pairwise, brute_ranks, pearson};

#[test]
fn kappa_is_one_on_unanimous_tables() {
    let two_categories = vec![vec![3, 0], vec![0, 3], vec![3, 0]];
    assert!((fleiss_kappa(&two_categories).unwrap() - 1.0).abs() < 1e-12);
    let four_categories = vec![vec![5, 0, 0, 0], vec![0, 0, 5, 0], vec![0, 5, 0, 0], vec![0, 0, 0, 5]];
    assert!((fleiss_kappa(&four_categories).unwrap() - 1.0).abs() < 1e-12);
    assert!((fleiss_kappa(&[vec![4, 0]]).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn kappa_hand_example() {
    // p_j = (5/9, 4/9) so P_e = 41/81; P_i = (1, 1/3, 1/3) so P̄ = 45/81;
    // κ = (45/81 − 41/81) / (40/81) = 0.1
    let k = fleiss_kappa(&[vec![3, 0], vec![1, 2], vec![1, 2]]).unwrap();
    assert!((k - 0.1).abs() < 1e-12, "{k}");
    let k = fleiss_kappa(&[vec![3, 0], vec![2, 1], vec![1, 2]]).unwrap();
    assert!(k.abs() < 1e-12, "{k}");
}

#[test]
fn kappa_near_zero_for_independent_raters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let table: Vec<Vec<usize>> = (0..1000)
        .map(|_| {
            let yes = (0..3).filter(|_| rng.random_bool(0.5)).count();
            vec![yes, 3 - yes]
        })
        .collect();
    let k = fleiss_kappa(&table).unwrap();
    assert!((-0.05..=0.05).contains(&k), "{k}");
}

#[test]
fn kappa_rejects_ragged_tables() {
    assert!(fleiss_kappa(&[]).is_err());
    assert!(fleiss_kappa(&[vec![3, 0], vec![1, 1]]).is_err());
    assert!(fleiss_kappa(&[vec![1, 0]]).is_err());
}

#[test]
fn pairwise_matches_enumeration_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let items: Vec<Vec<u8>> = (0..rng.random_range(1..30))
            .map(|_| (0..rng.random_range(0..7)).map(|_| rng.random_range(0..4)).collect())
            .collect();
        assert_eq!(pairwise_agreement(&items), brute_pairwise(&items));
    }
}

#[test]
fn spearman_edge_cases() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    assert!(spearman(&[1.0], &[1.0]).is_err());
}

#[test]
fn rmse_hand_case() {
    assert!((rmse_values(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
    assert!((2.5f64.sqrt() - 1.5811).abs() < 1e-4);
}

/// Precision and recall at one threshold, counted directly.
fn brute_point(preds: &[f64], gold: &[bool], t: f64) -> (f64, f64) {
    let tp = preds.iter().zip(gold).filter(|(p, g)| **p >= t && **g).count() as f64;
    let predicted = preds.iter().filter(|p| **p >= t).count() as f64;
    let positives = gold.iter().filter(|g| **g).count() as f64;
    let precision = if predicted == 0.0 { 1.0 } else { tp / predicted };
    let recall = if positives == 0.0 { 0.0 } else { tp / positives };
    (precision, recall)
}

#[test]
fn pr_curve_matches_threshold_sweep() {
    let preds = [0.95, 0.72, 0.72, 0.55, 0.3, 0.85];
    let gold = [true, false, true, true, false, true];
    let curve = pr_curve(&preds, &gold).unwrap();
    for pt in &curve {
        let (p, r) = brute_point(&preds, &gold, pt.threshold);
        assert!((pt.precision - p).abs() < 1e-12 && (pt.recall - r).abs() < 1e-12, "{pt:?}");
    }
    let thresholds: Vec<f64> = curve.iter().map(|p| p.threshold).collect();
    assert_eq!(thresholds, [0.3, 0.5, 0.55, 0.7, 0.72, 0.8, 0.85, 0.9, 0.95]);
}

proptest! {
    #[test]
    fn spearman_is_pearson_of_ranks(xs in prop::collection::vec(0u8..6, 3..25), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(0..5) as f64).collect();
        let rx = brute_ranks(&xs);
        let ry = brute_ranks(&ys);
        prop_assert_eq!(average_ranks(&xs), rx.clone());
        let expected = pearson(&rx, &ry);
        match spearman(&xs, &ys) {
            Ok(rho) => prop_assert!((rho - expected).abs() < 1e-9),
            Err(_) => prop_assert!(!expected.is_finite()),
        }
    }

    #[test]
    fn pr_curve_points_bounded_and_recall_falls(
        preds in prop::collection::vec(0.0f64..1.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold: Vec<bool> = preds.iter().map(|_| rng.random_bool(0.5)).collect();
        let curve = pr_curve(&preds, &gold).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].recall <= w[0].recall);
        }
        for pt in &curve {
            prop_assert!((0.0..=1.0).contains(&pt.precision) && (0.0..=1.0).contains(&pt.recall));
            let (p, r) = brute_point(&preds, &gold, pt.threshold);
            prop_assert!((pt.precision - p).abs() < 1e-12 && (pt.recall - r).abs() < 1e-12);
        }
    }
}
