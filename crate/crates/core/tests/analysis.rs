mod common;

use common::normal_tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepnorm::analysis::{
    effective_rank, linear_probe, measure_uniformity, per_dim_stats, singular_spectrum, symmetric_eigenvalues, EmbeddingSummary,
    ProbeConfig,
};
use sepnorm::Tensor;

fn center(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    Tensor::from_fn(vec![n, d], |k| x.data()[k] - means[k % d])
}

/// Largest singular value by power iteration on XᵀX.
fn power_sigma_max(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let xv: Vec<f64> = (0..n).map(|i| x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut w = vec![0.0; d];
        for (i, &s) in xv.iter().enumerate() {
            for (wj, &a) in w.iter_mut().zip(x.row(i)) {
                *wj += a * s;
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        let next = norm / v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = w.into_iter().map(|a| a / norm).collect();
        if (next - lambda).abs() < 1e-15 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

#[test]
fn sigma_max_agrees_with_power_iteration() {
    let x = normal_tensor(&[50, 16], &mut ChaCha8Rng::seed_from_u64(1));
    for centered in [false, true] {
        let s = singular_spectrum(&x, centered).unwrap();
        let oracle = power_sigma_max(&if centered { center(&x) } else { x.clone() });
        assert!((s[0] - oracle).abs() / oracle < 1e-8, "{} vs {oracle}", s[0]);
    }
}

#[test]
fn rank_one_cloud_has_one_singular_value() {
    let dir = [0.3, -1.2, 2.0, 0.5];
    let x = Tensor::from_fn(vec![6, 4], |k| (k / 4) as f64 * 0.7 * dir[k % 4] + if k < 4 { 1.0 * dir[k] } else { 0.0 });
    let s = singular_spectrum(&x, false).unwrap();
    assert!(s[0] > 1.0);
    assert!(s[1..].iter().all(|v| *v < 1e-10), "{s:?}");
}

#[test]
fn identity_rows_centered_spectrum() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let s = singular_spectrum(&x, true).unwrap();
    // centred rows form I − J/3, an orthogonal projector of rank 2
    assert!((s[0] - 1.0).abs() < 1e-8 && (s[1] - 1.0).abs() < 1e-8 && s[2].abs() < 1e-8, "{s:?}");
}

#[test]
fn jacobi_recovers_a_known_spectrum() {
    // Q·diag(5, 2, −1)·Qᵀ for a rotation Q
    let (c, s) = (0.6f64, 0.8f64);
    let q = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let l = [5.0, 2.0, -1.0];
    let a = Tensor::from_fn(vec![3, 3], |k| {
        let (i, j) = (k / 3, k % 3);
        (0..3).map(|m| q[i][m] * l[m] * q[j][m]).sum()
    });
    let e = symmetric_eigenvalues(&a).unwrap();
    for (got, want) in e.iter().zip([5.0, 2.0, -1.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn effective_rank_reference_values() {
    assert!((effective_rank(&[3.0, 3.0, 3.0, 3.0]).unwrap() - 4.0).abs() < 1e-12);
    assert_eq!(effective_rank(&[0.4, 0.0]).unwrap(), 1.0);
    assert!((effective_rank(&[2.0, 1.0, 1.0]).unwrap() - 2.8284).abs() < 1e-4);
    assert!(effective_rank(&[0.0, 0.0, 0.0]).is_err());
}

#[test]
fn per_dim_stats_of_gaussian_columns() {
    let x = normal_tensor(&[10_000, 3], &mut ChaCha8Rng::seed_from_u64(2));
    let s = per_dim_stats(&x).unwrap();
    assert_eq!(s.len(), 3);
    for d in s {
        assert!(d.mean.abs() < 0.05 && (d.std - 1.0).abs() < 0.05, "{d:?}");
    }
}

fn blobs(n: usize, d: usize, margin: f64, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let noise = normal_tensor(&[n, d], rng);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Tensor::from_fn(vec![n, d], |k| {
        let (i, j) = (k / d, k % d);
        let shift = if j == 0 { if labels[i] == 0 { -margin / 2.0 } else { margin / 2.0 } } else { 0.0 };
        noise.data()[k] + shift
    });
    (x, labels)
}

#[test]
fn probe_separates_well_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // centres 6σ apart: the plane x₀ = 0 leaves a 3σ margin on each side
    let (tr, ytr) = blobs(400, 5, 6.0, &mut rng);
    let (te, yte) = blobs(400, 5, 6.0, &mut rng);
    let r = linear_probe(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy >= 0.99, "{}", r.accuracy);
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tr = normal_tensor(&[2000, 8], &mut rng);
    let te = normal_tensor(&[2000, 8], &mut rng);
    let mut ytr: Vec<usize> = (0..2000).map(|i| i % 4).collect();
    let mut yte = ytr.clone();
    ytr.shuffle(&mut rng);
    yte.shuffle(&mut rng);
    let r = linear_probe(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
    assert!((r.accuracy - 0.25).abs() < 0.05, "{}", r.accuracy);
}

#[test]
fn probe_loss_does_not_increase_at_small_lr() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tr, ytr) = blobs(200, 6, 1.0, &mut rng);
    let cfg = ProbeConfig {
        lr: 1e-2,
        epochs: 300,
        ..Default::default()
    };
    let r = linear_probe(&tr, &ytr, &tr, &ytr, &cfg).unwrap();
    for w in r.loss_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
    }
    assert!(linear_probe(&tr, &vec![1; 200], &tr, &ytr, &cfg).is_err());
}

#[test]
fn large_inputs_are_subsampled_deterministically() {
    let x = normal_tensor(&[4100, 4], &mut ChaCha8Rng::seed_from_u64(6));
    let a = measure_uniformity(&x).unwrap();
    assert_eq!(a.rows_used, 4096);
    assert_eq!(a, measure_uniformity(&x).unwrap());
}

#[test]
fn summary_is_pure() {
    let x = normal_tensor(&[30, 6], &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(EmbeddingSummary::compute(&x, true).unwrap(), EmbeddingSummary::compute(&x, true).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frobenius_identity(seed in 0u64..100_000, n in 2usize..30, d in 1usize..12, centered in any::<bool>()) {
        let x = normal_tensor(&[n, d], &mut ChaCha8Rng::seed_from_u64(seed));
        let s = singular_spectrum(&x, centered).unwrap();
        prop_assert_eq!(s.len(), n.min(d));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]) && s.iter().all(|v| *v >= 0.0));
        let m = if centered { center(&x) } else { x };
        let fro: f64 = m.data().iter().map(|v| v * v).sum();
        let sum: f64 = s.iter().map(|v| v * v).sum();
        prop_assert!((sum - fro).abs() <= 1e-10 * fro.max(1e-300));
    }

    #[test]
    fn effective_rank_scale_invariant_and_bounded(vals in proptest::collection::vec(0.0f64..10.0, 1..20), k in 0.01f64..100.0) {
        prop_assume!(vals.iter().any(|v| *v > 0.0));
        let r = effective_rank(&vals).unwrap();
        let scaled: Vec<f64> = vals.iter().map(|v| v * k).collect();
        prop_assert!((effective_rank(&scaled).unwrap() - r).abs() < 1e-9 * r);
        prop_assert!(r >= 1.0 - 1e-12 && r <= vals.len() as f64 + 1e-9);
    }
}
