//! Linear probe on raw pixels versus on [CLS] embeddings of a briefly
//! pretrained encoder.
//!
//! ```text
//! cargo run --release --example probe -- [steps] [norm]
//! ```

use sepnorm::analysis::{linear_probe, ProbeConfig};
use sepnorm::config::RunConfig;
use sepnorm::data::{generate, DatasetKind, SyntheticDatasetSpec};
use sepnorm::harness::{prepare_for_eval, probe_model};
use sepnorm::train::pretrain;
use sepnorm::Tensor;

fn main() -> sepnorm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    cfg.set("steps", args.first().map(String::as_str).unwrap_or("300"))?;
    cfg.set("norm", args.get(1).map(String::as_str).unwrap_or("sep:bn+ln"))?;

    for kind in [DatasetKind::ClassBlobs, DatasetKind::Textures] {
        let pair = generate(&SyntheticDatasetSpec {
            kind,
            ..Default::default()
        })?;
        let stats = pair.train.pixel_stats();
        let flat = |d: &sepnorm::data::Dataset| {
            let idx: Vec<usize> = (0..d.len()).collect();
            let b = d.batch(&idx, stats);
            Tensor::new(vec![d.len(), d.height * d.width], b.data().to_vec()).expect("flatten")
        };
        let raw = linear_probe(
            &flat(&pair.train),
            &pair.train.labels_usize(),
            &flat(&pair.test),
            &pair.test.labels_usize(),
            &ProbeConfig::default(),
        )?;
        let mut model = pretrain(&cfg, &pair.train, None)?.model;
        prepare_for_eval(&mut model, &pair, cfg.optimizer.batch_size)?;
        let acc = probe_model(&mut model, &pair, &cfg.probe)?;
        println!("{kind:<12} raw pixels {:.3}   [CLS] after {} steps {acc:.3}", raw.accuracy, cfg.optimizer.steps);
    }
    Ok(())
}
