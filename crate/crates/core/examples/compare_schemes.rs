//! Pretrain ShareNorm(LN) and SepNorm(BN,LN) side by side for a few seeds
//! and compare the [CLS] embeddings of the test split.
//!
//! ```text
//! cargo run --release --example compare_schemes -- [steps] [seeds] [lambda]
//! ```

use sepnorm::analysis::EmbeddingSummary;
use sepnorm::config::RunConfig;
use sepnorm::data::{generate, SyntheticDatasetSpec};
use sepnorm::harness::{embed_dataset, prepare_for_eval, probe_model};
use sepnorm::norm::NormScheme;
use sepnorm::train::pretrain;

fn main() -> sepnorm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().map(String::as_str).unwrap_or("500");
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lambda = args.get(2).map(String::as_str).unwrap_or("0");
    let pair = generate(&SyntheticDatasetSpec::default())?;
    let stats = pair.train.pixel_stats();

    println!("scheme,seed,cls_uniformity,cls_effrank,token_uniformity,probe_acc");
    for scheme in ["share:ln", "sep:bn+ln"] {
        for seed in 0..seeds {
            let mut cfg = RunConfig::default();
            cfg.set("norm", scheme)?;
            cfg.set("steps", steps)?;
            cfg.set("lambda", lambda)?;
            cfg.set("target", if lambda.parse::<f64>().unwrap_or(0.0) > 0.0 { "cls" } else { "none" })?;
            cfg.seed = seed;
            let mut model = pretrain(&cfg, &pair.train, None)?.model;
            prepare_for_eval(&mut model, &pair, cfg.optimizer.batch_size)?;
            let (cls, tokens) = embed_dataset(&mut model, &pair.test, stats)?;
            let c = EmbeddingSummary::compute(&cls, true)?;
            let t = EmbeddingSummary::compute(&tokens, true)?;
            let acc = probe_model(&mut model, &pair, &cfg.probe)?;
            let s: NormScheme = scheme.parse()?;
            println!("{s},{seed},{:.4},{:.3},{:.4},{:.3}", c.uniformity, c.effective_rank, t.uniformity, acc);
        }
    }
    Ok(())
}
