use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sepnorm::analysis::ProbeConfig;
use sepnorm::config::RunConfig;
use sepnorm::data::{DatasetKind, SyntheticDatasetSpec};
use sepnorm::harness::{cmd_ablate, cmd_analyze, cmd_gen_data, cmd_pretrain, cmd_probe, GridConfig};
use sepnorm::norm::NormScheme;
use sepnorm::objectives::UniformityTarget;

#[derive(Parser)]
#[command(name = "sepnorm", version, about = "Separate [CLS]/token normalization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labelled image dataset.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value = "class-blobs")]
        kind: DatasetKind,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 256)]
        test: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain one model.
    Pretrain(RunArgs),
    /// Run the scheme × λ × target × seed grid and write report.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated schemes, e.g. share:ln,sep:bn+ln.
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<NormScheme>>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<UniformityTarget>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Embed the test split with a checkpoint and write diagnostics.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen [CLS] embeddings.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file applied before the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Output directory; defaults to $SEPNORM_OUT or ./runs.
    #[arg(long)]
    out: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> sepnorm::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let named = [
            ("norm", &self.norm),
            ("lambda", &self.lambda),
            ("target", &self.target),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("data", &self.data),
            ("out", &self.out),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.sets {
            cfg.apply_kv_str(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> sepnorm::Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            kind,
            classes,
            train,
            test,
            side,
            noise,
            seed,
        } => {
            let spec = SyntheticDatasetSpec {
                kind,
                classes,
                train_count: train,
                test_count: test,
                image_side: side,
                noise,
                seed,
            };
            let pair = cmd_gen_data(&spec, &out)?;
            println!("wrote {} train / {} test images to {}", pair.train.len(), pair.test.len(), out.display());
        }
        Cmd::Pretrain(args) => {
            let cfg = args.resolve()?;
            let s = cmd_pretrain(&cfg)?;
            if let Some(last) = s.rows.last() {
                println!("step {} l_mae {:.5} total {:.5}", last.step, last.l_mae, last.total);
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Cmd::Ablate {
            run,
            schemes,
            lambdas,
            targets,
            seeds,
        } => {
            let base = run.resolve()?;
            let out = base.out_dir.clone();
            let mut grid = GridConfig::full_grid(base);
            if let Some(s) = schemes {
                grid.schemes = s;
            }
            if let Some(l) = lambdas {
                grid.lambdas = l;
            }
            if let Some(t) = targets {
                grid.targets = t;
            }
            if let Some(s) = seeds {
                grid.seeds = s;
            }
            let s = cmd_ablate(&grid, &out)?;
            println!(
                "{} cells ({} trained, {} reused), report at {}",
                s.rows.len(),
                s.cells_trained,
                s.cells_reused,
                s.report.display()
            );
        }
        Cmd::Analyze { checkpoint, data, out } => {
            let a = cmd_analyze(&checkpoint, &data, &out)?;
            println!(
                "cls uniformity {:.4}  token uniformity {:.4}  cls effrank {:.3}  probe {:.3}",
                a.row.cls_uniformity,
                a.row.token_uniformity,
                a.row.cls_effrank,
                a.row.probe_acc.unwrap_or(f64::NAN)
            );
        }
        Cmd::Probe { checkpoint, data, epochs, lr } => {
            let mut probe = ProbeConfig::default();
            let custom = epochs.is_some() || lr.is_some();
            if let Some(e) = epochs {
                probe.epochs = e;
            }
            if let Some(l) = lr {
                probe.lr = l;
            }
            let acc = cmd_probe(&checkpoint, &data, custom.then_some(&probe))?;
            println!("probe accuracy {acc:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
