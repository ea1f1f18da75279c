mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::tiny_run;
use sepnorm::analysis::{measure_uniformity, singular_spectrum, effective_rank};
use sepnorm::checkpoint::Checkpoint;
use sepnorm::config::RunConfig;
use sepnorm::data::{DatasetKind, DatasetPair, SyntheticDatasetSpec};
use sepnorm::harness::*;
use sepnorm::objectives::UniformityTarget;
use sepnorm::train::{Model, LOG_HEADER};
use sepnorm::{NormScheme, Tensor};

fn tiny_data(dir: &Path) -> DatasetPair {
    let spec = SyntheticDatasetSpec {
        kind: DatasetKind::ClassBlobs,
        train_count: 64,
        test_count: 32,
        image_side: 8,
        ..Default::default()
    };
    cmd_gen_data(&spec, dir).unwrap()
}

fn run_in(root: &Path, scheme: &str, steps: usize) -> RunConfig {
    let mut cfg = tiny_run(scheme.parse().unwrap(), 0.1, "cls");
    cfg.optimizer.steps = steps;
    cfg.optimizer.batch_size = 8;
    cfg.probe.epochs = 50;
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg
}

#[test]
fn checkpoint_roundtrip_is_byte_exact_and_restores_the_model() {
    let root = tempfile::tempdir().unwrap();
    let pair = tiny_data(&root.path().join("data"));
    let cfg = run_in(root.path(), "sep:bn+ln", 6);
    let summary = cmd_pretrain(&cfg).unwrap();
    let bytes = fs::read(&summary.checkpoint).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.to_bytes(), bytes);

    let (mut a, _) = Model::from_checkpoint(&ck, Some(&cfg)).unwrap();
    let (mut b, _) = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), None).unwrap();
    let stats = pair.train.pixel_stats();
    let ea = embed_dataset(&mut a, &pair.test, stats).unwrap();
    let eb = embed_dataset(&mut b, &pair.test, stats).unwrap();
    assert_eq!(ea.0.data(), eb.0.data());
    assert_eq!(ea.1.data(), eb.1.data());

    let mut other = cfg.clone();
    other.encoder.dim = 16;
    let err = Model::from_checkpoint(&ck, Some(&other)).unwrap_err().to_string();
    assert!(err.contains("dim=16") && err.contains("dim=8"), "{err}");
}

#[test]
fn zero_steps_saves_the_initial_model() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    let cfg = run_in(root.path(), "share:ln", 0);
    let summary = cmd_pretrain(&cfg).unwrap();
    assert_eq!(fs::read_to_string(&summary.log).unwrap(), format!("{LOG_HEADER}\n"));
    let ck = Checkpoint::load(&summary.checkpoint).unwrap();
    let init = Model::new(&cfg).unwrap();
    for (rec, p) in ck.params.iter().zip(init.store.iter()) {
        assert_eq!(rec.name, p.name);
        assert_eq!(rec.value, p.value);
    }
}

#[test]
fn analyze_report_agrees_with_the_dumps() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    let cfg = run_in(root.path(), "sep:bn+ln", 4);
    let summary = cmd_pretrain(&cfg).unwrap();
    let out = root.path().join("analysis");
    let outcome = cmd_analyze(&summary.checkpoint, &cfg.data_dir, &out).unwrap();

    let cls = load_matrix(&out.join(CLS_DUMP_FILE)).unwrap();
    let tokens = load_matrix(&out.join(TOKEN_DUMP_FILE)).unwrap();
    assert_eq!(cls.shape(), &[32, 8]);
    assert_eq!(tokens.shape(), &[32 * 4, 8]);
    assert!((measure_uniformity(&cls).unwrap().value - outcome.row.cls_uniformity).abs() < 1e-12);
    assert!((measure_uniformity(&tokens).unwrap().value - outcome.row.token_uniformity).abs() < 1e-12);
    let er = effective_rank(&singular_spectrum(&cls, true).unwrap()).unwrap();
    assert!((er - outcome.row.cls_effrank).abs() < 1e-12);

    let text = fs::read_to_string(out.join(REPORT_ROW_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(REPORT_HEADER));
    assert_eq!(ReportRow::from_csv(lines.next().unwrap()).unwrap(), outcome.row);
    assert_eq!(outcome.row.l_mae_final, Some(summary.rows.last().unwrap().l_mae));

    let spectra = fs::read_to_string(out.join(SPECTRA_FILE)).unwrap();
    assert_eq!(spectra.lines().count(), 1 + 8);
    let first: Vec<&str> = spectra.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[2], "1");
    assert_eq!(fs::read_to_string(out.join(DIM_STATS_FILE)).unwrap().lines().count(), 1 + 8);
}

#[test]
fn untrained_model_analyzes_to_finite_metrics() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    for scheme in ["share:ln", "share:bn", "sep:bn+bn"] {
        let cfg = run_in(root.path(), scheme, 0);
        let summary = cmd_pretrain(&cfg).unwrap();
        let row = cmd_analyze(&summary.checkpoint, &cfg.data_dir, &root.path().join("a")).unwrap().row;
        assert_eq!(row.l_mae_final, None);
        for v in [row.cls_uniformity, row.token_uniformity, row.cls_effrank, row.token_effrank, row.probe_acc.unwrap()] {
            assert!(v.is_finite(), "{scheme}: {row:?}");
        }
    }
}

#[test]
fn probe_command_matches_analyze() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    let cfg = run_in(root.path(), "sep:ln+ln", 3);
    let summary = cmd_pretrain(&cfg).unwrap();
    let acc = cmd_probe(&summary.checkpoint, &cfg.data_dir, None).unwrap();
    let row = cmd_analyze(&summary.checkpoint, &cfg.data_dir, &root.path().join("a")).unwrap().row;
    assert_eq!(Some(acc), row.probe_acc);
}

fn small_grid(root: &Path) -> GridConfig {
    let base = run_in(root, "share:ln", 2);
    GridConfig {
        base,
        schemes: vec![NormScheme::Share(sepnorm::NormKind::Ln), "sep:bn+ln".parse().unwrap()],
        lambdas: vec![0.0, 0.1],
        targets: vec![UniformityTarget::Cls, UniformityTarget::Both],
        seeds: vec![0],
    }
}

#[test]
fn ablate_writes_one_row_per_cell_and_resumes() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    let grid = small_grid(root.path());
    assert_eq!(grid.cells().len(), 2 * (1 + 2));
    let out = root.path().join("grid");
    let first = cmd_ablate(&grid, &out).unwrap();
    assert_eq!((first.cells_trained, first.cells_reused, first.steps_executed), (6, 0, 12));
    let text = fs::read_to_string(&first.report).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    assert_eq!(text.lines().count(), 7);

    // an interrupted cell (checkpoint but no report row) is redone
    let victim = cell_dir(&out, &grid.cells()[1]);
    fs::remove_file(victim.join(REPORT_ROW_FILE)).unwrap();
    let second = cmd_ablate(&grid, &out).unwrap();
    assert_eq!((second.cells_trained, second.cells_reused, second.steps_executed), (1, 5, 2));
    assert_eq!(fs::read_to_string(&second.report).unwrap(), text);

    let third = cmd_ablate(&grid, &out).unwrap();
    assert_eq!((third.cells_trained, third.steps_executed), (0, 0));
}

#[test]
fn single_cell_ablation_equals_pretrain_then_analyze() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    let mut grid = small_grid(root.path());
    grid.schemes.truncate(1);
    grid.lambdas = vec![0.1];
    grid.targets = vec![UniformityTarget::Cls];
    let summary = cmd_ablate(&grid, &root.path().join("grid")).unwrap();

    let mut cfg = grid.cells()[0].clone();
    cfg.out_dir = root.path().join("solo");
    let p = cmd_pretrain(&cfg).unwrap();
    let row = cmd_analyze(&p.checkpoint, &cfg.data_dir, &cfg.out_dir).unwrap().row;
    assert_eq!(summary.rows, vec![row]);
}

#[test]
fn matrix_dump_roundtrip() {
    let m = Tensor::from_fn(vec![3, 5], |i| i as f64 * 0.25 - 1.0);
    let bytes = matrix_to_bytes(&m);
    assert_eq!(&bytes[..4], b"SNMX");
    assert_eq!(matrix_from_bytes(&bytes).unwrap(), m);
    assert!(matrix_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(matrix_from_bytes(b"NOPE00000000").is_err());
}

#[test]
fn diverging_run_keeps_the_last_good_parameters() {
    let root = tempfile::tempdir().unwrap();
    tiny_data(&root.path().join("data"));
    let mut cfg = run_in(root.path(), "share:ln", 50);
    cfg.optimizer.lr = 1e150;
    let err = cmd_pretrain(&cfg).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
    let ck = Checkpoint::load(&cfg.out_dir.join(LAST_GOOD_FILE)).unwrap();
    assert!(ck.params.iter().all(|p| p.value.data().iter().all(|v| v.is_finite())));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sepnorm"))
}

#[test]
fn cli_runs_the_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let status = bin()
        .args(["gen-data", "--out"])
        .arg(&data)
        .args(["--train", "64", "--test", "32", "--side", "8"])
        .status()
        .unwrap();
    assert!(status.success());
    let cfg_file = root.path().join("tiny.cfg");
    fs::write(
        &cfg_file,
        "image_side=8\npatch_side=4\ndim=8\ndepth=1\nheads=2\ndecoder_depth=1\ndecoder_dim=8\ndecoder_heads=2\nbatch_size=8\nprobe_epochs=20\n",
    )
    .unwrap();
    let status = bin()
        .arg("pretrain")
        .arg("--config")
        .arg(&cfg_file)
        .args(["--norm", "sep:bn+ln", "--steps", "3", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    let out = bin()
        .args(["analyze", "--checkpoint"])
        .arg(run.join(CHECKPOINT_FILE))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(root.path().join("an"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("an").join(REPORT_ROW_FILE).exists());

    let bad = bin().args(["pretrain", "--set", "colour=blue"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("colour"));
}
