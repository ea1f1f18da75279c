//! Builds the encoder for each scheme, encodes a batch of synthetic images
//! and reports output shapes and parameter counts.
//!
//! ```text
//! cargo run --example encode
//! ```

use sepnorm::data::{generate, SyntheticDatasetSpec};
use sepnorm::encoder::{Encoder, EncoderConfig};
use sepnorm::nn::{Ctx, Mode};
use sepnorm::norm::NormScheme;
use sepnorm::params::ParamStore;
use sepnorm::Graph;

fn main() -> sepnorm::Result<()> {
    let pair = generate(&SyntheticDatasetSpec {
        train_count: 8,
        test_count: 4,
        ..Default::default()
    })?;
    let images = pair.train.batch(&[0, 1, 2, 3], pair.train.pixel_stats());

    for scheme in NormScheme::ALL {
        let cfg = EncoderConfig {
            norm_scheme: scheme,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg, &mut store)?;
        let trainable: usize = store.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum();
        let buffers: usize = store.iter().filter(|p| !p.trainable).map(|p| p.value.numel()).sum();

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, Mode::Eval);
        let out = encoder.encode(&mut ctx, &images, None)?;
        let cls = g.value(out.cls);
        let norm0 = cls.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{:<10} cls {:?} tokens {:?}  params {trainable} (+{buffers} buffers)  |cls₀| {norm0:.3}",
            scheme.to_string(),
            cls.shape(),
            g.value(out.tokens).shape()
        );
    }
    Ok(())
}
