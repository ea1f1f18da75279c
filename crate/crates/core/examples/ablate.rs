//! A reduced ablation grid through the same code path as `sepnorm ablate`:
//! every scheme, λ ∈ {0, 0.1}, [CLS] target, short runs. Re-running reuses
//! finished cells.
//!
//! ```text
//! cargo run --release --example ablate -- [out_dir] [steps]
//! ```

use std::path::PathBuf;

use sepnorm::config::RunConfig;
use sepnorm::data::SyntheticDatasetSpec;
use sepnorm::harness::{cmd_ablate, cmd_gen_data, GridConfig};
use sepnorm::norm::NormScheme;
use sepnorm::objectives::UniformityTarget;

fn main() -> sepnorm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = PathBuf::from(args.first().map(String::as_str).unwrap_or("runs/ablate-example"));
    let data = root.join("data");
    if !data.join(sepnorm::data::TRAIN_FILE).exists() {
        cmd_gen_data(&SyntheticDatasetSpec::default(), &data)?;
    }
    let mut base = RunConfig::default();
    base.set("steps", args.get(1).map(String::as_str).unwrap_or("100"))?;
    base.data_dir = data;
    let grid = GridConfig {
        base,
        schemes: NormScheme::ABLATION.to_vec(),
        lambdas: vec![0.0, 0.1],
        targets: vec![UniformityTarget::Cls],
        seeds: vec![0],
    };
    let summary = cmd_ablate(&grid, &root)?;
    println!(
        "{} cells trained, {} reused, {} steps; report at {}",
        summary.cells_trained,
        summary.cells_reused,
        summary.steps_executed,
        summary.report.display()
    );
    print!("{}", std::fs::read_to_string(&summary.report)?);
    Ok(())
}
