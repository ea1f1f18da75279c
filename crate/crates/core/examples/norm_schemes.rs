//! Applies every normalization scheme to one batch of sequences and shows
//! what the [CLS] slot and the token slots come out as. Under a separate
//! scheme, changing a token leaves the normalized [CLS] untouched.
//!
//! ```text
//! cargo run --example norm_schemes
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sepnorm::nn::{Ctx, Mode};
use sepnorm::norm::{NormScheme, NormSite};
use sepnorm::params::ParamStore;
use sepnorm::{Graph, Tensor};

const B: usize = 6;
const S: usize = 5;
const D: usize = 4;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

fn run(site: &NormSite, store: &mut ParamStore, x: &Tensor) -> sepnorm::Result<Tensor> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Mode::Train);
    let h = ctx.graph.constant(x.clone());
    let y = site.apply(&mut ctx, h)?;
    Ok(g.value(y).clone())
}

fn main() -> sepnorm::Result<()> {
    // [CLS] lives on a very different scale from the tokens
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cls = Normal::new(20.0, 5.0).unwrap();
    let tok = Normal::new(0.0, 1.0).unwrap();
    let x = Tensor::from_fn(vec![B, S, D], |k| if (k / D).is_multiple_of(S) { cls.sample(&mut rng) } else { tok.sample(&mut rng) });
    let mut poked = x.clone();
    poked.data_mut()[2 * D] += 100.0;

    println!("{:<10} {:>16} {:>16} {:>14}", "scheme", "cls mean/std", "token mean/std", "cls moved by");
    for scheme in NormScheme::ALL {
        let mut store = ParamStore::new();
        let site = NormSite::new(&mut store, "demo", scheme, D);
        let y = run(&site, &mut store, &x)?;
        let y2 = run(&site, &mut store, &poked)?;
        let (c, t): (Vec<f64>, Vec<f64>) = {
            let (mut c, mut t) = (Vec::new(), Vec::new());
            for (k, v) in y.data().iter().enumerate() {
                if (k / D).is_multiple_of(S) { c.push(*v) } else { t.push(*v) }
            }
            (c, t)
        };
        let moved = (0..B)
            .flat_map(|b| (0..D).map(move |i| b * S * D + i))
            .map(|k| (y.data()[k] - y2.data()[k]).abs())
            .fold(0.0, f64::max);
        let (cm, cs) = mean_std(&c);
        let (tm, ts) = mean_std(&t);
        println!("{:<10} {cm:>7.3}/{cs:<7.3} {tm:>7.3}/{ts:<7.3} {moved:>14.3e}", scheme.to_string());
    }
    Ok(())
}
