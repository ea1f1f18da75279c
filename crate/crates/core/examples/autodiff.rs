//! Reverse-mode gradients on a small expression, checked against central
//! differences.
//!
//! ```text
//! cargo run --example autodiff
//! ```

use sepnorm::{Graph, Tensor};

fn loss(g: &mut Graph, x: sepnorm::Var, w: sepnorm::Var) -> sepnorm::Result<sepnorm::Var> {
    let h = g.matmul(x, w)?;
    let h = g.gelu(h);
    let p = g.softmax(h, 1)?;
    let lp = g.log(p);
    let m = g.mean_all(lp);
    Ok(g.neg(m))
}

fn main() -> sepnorm::Result<()> {
    let x = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin());
    let w = Tensor::from_fn(vec![4, 5], |i| (i as f64 * 0.91).cos() * 0.5);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let wv = g.leaf(w.clone(), true);
    let l = loss(&mut g, xv, wv)?;
    g.backward(l)?;
    let analytic = g.grad(wv).expect("w requires grad").clone();
    println!("loss {:.6}, graph nodes {}", g.value(l).item(), g.len());

    let eval = |w: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.leaf(w.clone(), false);
        let l = loss(&mut g, xv, wv).unwrap();
        g.value(l).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..w.numel() {
        let mut up = w.clone();
        up.data_mut()[k] += h;
        let mut down = w.clone();
        down.data_mut()[k] -= h;
        let fd = (eval(&up) - eval(&down)) / (2.0 * h);
        worst = worst.max((fd - analytic.data()[k]).abs());
    }
    println!("max |autodiff − finite difference| over {} weights: {worst:.2e}", w.numel());
    Ok(())
}
