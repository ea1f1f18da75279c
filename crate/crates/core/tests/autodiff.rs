mod common;

use common::{check_leaves, normal_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepnorm::graph::{gelu, Graph};
use sepnorm::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let mut r = rng(1);
    let a = normal_tensor(&[3, 4], &mut r);
    let b = normal_tensor(&[4, 2], &mut r);
    let worst = check_leaves(&[a.clone(), b.clone()], 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        g.sum_all(c)
    });
    assert!(worst < 1e-6, "worst {worst}");

    let mut g = Graph::new();
    let av = g.leaf(a, true);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let loss = g.sum_all(c);
    g.backward(loss).unwrap();
    let grad = g.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = b.row(k).iter().sum();
            assert!((grad.row(i)[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let x = normal_tensor(&[5], &mut rng(2));
    // one output coordinate at a time recovers the full Jacobian
    for j in 0..5 {
        let worst = check_leaves(std::slice::from_ref(&x), 1e-5, |g, v| {
            let s = g.softmax(v[0], 0).unwrap();
            let picked = g.index_select(s, 0, &[j]).unwrap();
            g.sum_all(picked)
        });
        assert!(worst < 1e-6, "column {j}: {worst}");
    }
}

#[test]
fn reductions_match_finite_differences() {
    let x = normal_tensor(&[3, 6], &mut rng(3));
    let w = normal_tensor(&[3, 1], &mut rng(4));
    for axis in 0..2 {
        let worst = check_leaves(std::slice::from_ref(&x), 1e-5, |g, v| {
            let m = g.reduce_mean(v[0], axis).unwrap();
            let s = g.square(m);
            g.sum_all(s)
        });
        assert!(worst < 1e-6, "mean axis {axis}: {worst}");
    }
    let worst = check_leaves(&[x, w], 1e-5, |g, v| {
        let var = g.reduce_var(v[0], 1).unwrap();
        let y = g.mul(var, v[1]).unwrap();
        g.sum_all(y)
    });
    assert!(worst < 1e-6, "var: {worst}");
}

#[test]
fn gelu_gradient_on_a_grid() {
    let xs: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
    let x = Tensor::new(vec![xs.len()], xs).unwrap();
    let worst = check_leaves(&[x], 1e-5, |g, v| {
        let y = g.gelu(v[0]);
        g.sum_all(y)
    });
    assert!(worst < 1e-5, "{worst}");
    assert_eq!(gelu(0.0), 0.0);
}

#[test]
fn exp_log_roundtrip_and_nan_warnings() {
    let mut g = Graph::new();
    g.set_checks(true);
    let x = g.leaf(Tensor::new(vec![3], vec![0.5, 2.0, 9.0]).unwrap(), true);
    let l = g.log(x);
    let e = g.exp(l);
    for (a, b) in g.value(e).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let bad = g.constant(Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap());
    let lb = g.log(bad);
    assert!(g.value(lb).data().iter().all(|v| v.is_nan()));
    assert!(g.warning_count() > 0);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unused_leaves() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(vec![2]), true);
    let y = g.leaf(Tensor::ones(vec![2]), true);
    let sq = g.square(x);
    assert!(g.backward(sq).is_err());
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    assert!(g.grad(y).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn graph_values_are_deterministic() {
    let run = || {
        let x = normal_tensor(&[4, 3], &mut rng(5));
        let mut g = Graph::new();
        let v = g.leaf(x, true);
        let t = g.transpose_last(v).unwrap();
        let p = g.matmul(v, t).unwrap();
        let s = g.softmax(p, 1).unwrap();
        let loss = g.sum_all(s);
        let loss = g.mul_scalar(loss, 0.3);
        g.backward(loss).unwrap();
        (g.value(s).clone(), g.grad(v).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// A composed loss touching most ops agrees with central differences.
    #[test]
    fn composed_loss_gradcheck(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = normal_tensor(&[3, 4], &mut r);
        let b = normal_tensor(&[4, 4], &mut r);
        let c = normal_tensor(&[4], &mut r);
        let worst = check_leaves(&[a, b, c], 1e-5, |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            let m = g.add(m, v[2]).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let h = g.gelu(m);
            let e = g.mul(s, h).unwrap();
            let var = g.reduce_var(e, 1).unwrap();
            let sq = g.add_scalar(var, 1.0);
            let r = g.sqrt(sq);
            let l = g.log(r);
            let mean = g.reduce_mean(m, 0).unwrap();
            let ex = g.exp(mean);
            let ex = g.div(ex, v[2]).unwrap();
            let t1 = g.sum_all(l);
            let t2 = g.mean_all(ex);
            g.sub(t1, t2).unwrap()
        });
        prop_assert!(worst < 1e-4, "worst {}", worst);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1000.0f64..1000.0, 2..12)) {
        let n = vals.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n], vals).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!(g.value(s).all_finite());
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trailing_broadcast_gradient_sums_over_leading_axes(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = normal_tensor(&[2, 3, 4], &mut r);
        let b = normal_tensor(&[4], &mut r);
        // quadratic in every coordinate, so a wide step loses nothing
        let worst = check_leaves(&[x, b], 1e-2, |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            let y = g.square(y);
            g.sum_all(y)
        });
        prop_assert!(worst < 1e-6, "worst {}", worst);
    }
}
