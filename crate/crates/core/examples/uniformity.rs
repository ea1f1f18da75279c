//! The uniformity measure on a few reference clouds, then gradient descent
//! on it spreading a collapsed cloud over the sphere.
//!
//! ```text
//! cargo run --release --example uniformity
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sepnorm::analysis::measure_uniformity;
use sepnorm::objectives::uniformity_loss;
use sepnorm::{Graph, Tensor};

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(vec![n, d], |_| StandardNormal.sample(rng))
}

fn main() -> sepnorm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sphere = gaussian(1024, 128, &mut rng);
    let collapsed = Tensor::from_fn(vec![256, 16], |k| 1.0 + 0.01 * ((k * 7919) % 97) as f64 / 97.0);
    let antipodal = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
    for (name, x) in [("uniform on S^127", &sphere), ("near-collapsed", &collapsed), ("two antipodes", &antipodal)] {
        println!("{name:<18} {:>8.4}", measure_uniformity(x)?.value);
    }

    // descend L_U directly on a tight cloud in 8 dimensions
    let mut x = Tensor::from_fn(vec![64, 8], |k| if k % 8 == 0 { 1.0 } else { {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.05 * z
    } });
    for step in 0..=200 {
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let l = uniformity_loss(&mut g, v)?;
        if step % 40 == 0 {
            println!("step {step:>3}  L_U {:.4}", g.value(l).item());
        }
        g.backward(l)?;
        let grad = g.grad(v).expect("leaf gradient").clone();
        for (w, d) in x.data_mut().iter_mut().zip(grad.data()) {
            *w -= 2.0 * d;
        }
    }
    Ok(())
}
