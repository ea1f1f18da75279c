//! Singular spectrum and effective rank of clouds with a controlled number
//! of active directions.
//!
//! ```text
//! cargo run --example spectrum
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sepnorm::analysis::EmbeddingSummary;
use sepnorm::Tensor;

fn main() -> sepnorm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, d) = (512, 32);
    for active in [1, 4, 16, 32] {
        // variance decays geometrically past the first `active` directions
        let x = Tensor::from_fn(vec![n, d], |k| {
            let j = k % d;
            let scale = if j < active { 1.0 } else { 0.05f64.powi((j - active + 1) as i32) };
            {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            }
        });
        let s = EmbeddingSummary::compute(&x, true)?;
        let head: Vec<String> = s.singular_values.iter().take(6).map(|v| format!("{:.1}", v / s.singular_values[0])).collect();
        println!("active {active:>2}: effective rank {:>6.2}  σ/σ₀ {}", s.effective_rank, head.join(" "));
    }
    Ok(())
}
