//! Pretrain one model on a freshly generated dataset and print the loss
//! curve every few steps.
//!
//! ```text
//! cargo run --release --example pretrain -- [norm] [steps] [lambda] [target]
//! cargo run --release --example pretrain -- sep:bn+ln 300 0.1 cls
//! ```

use std::time::Instant;

use sepnorm::config::RunConfig;
use sepnorm::data::{generate, SyntheticDatasetSpec};
use sepnorm::train::pretrain;

fn main() -> sepnorm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    cfg.set("norm", args.first().map(String::as_str).unwrap_or("sep:bn+ln"))?;
    cfg.set("steps", args.get(1).map(String::as_str).unwrap_or("200"))?;
    cfg.set("lambda", args.get(2).map(String::as_str).unwrap_or("0"))?;
    cfg.set("target", args.get(3).map(String::as_str).unwrap_or("none"))?;

    let pair = generate(&SyntheticDatasetSpec::default())?;
    let start = Instant::now();
    let out = pretrain(&cfg, &pair.train, None)?;
    let every = (out.log.len() / 10).max(1);
    for row in out.log.iter().step_by(every) {
        println!("{}", row.to_csv());
    }
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} steps with {} in {:.1}s ({:.1} ms/step)",
        out.steps_done,
        cfg.encoder.norm_scheme,
        secs,
        1e3 * secs / out.steps_done.max(1) as f64
    );
    Ok(())
}
