//! File-level workflows behind the CLI: dataset generation, pretraining,
//! analysis, probing and the resumable ablation grid.
//!
//! Embedding dumps use the `SNMX` matrix format (little-endian):
//! magic `"SNMX"`, `u32` rows, `u32` cols, then `rows·cols` `f64` values
//! row-major.
//!
//! Report rows follow [`REPORT_HEADER`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{linear_probe, AnalysisReport, EmbeddingSummary, ProbeConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, Dataset, DatasetPair, SyntheticDatasetSpec};
use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::nn::{Ctx, Mode};
use crate::norm::NormScheme;
use crate::objectives::UniformityTarget;
use crate::tensor::Tensor;
use crate::train::{log_to_csv, pretrain, LogRow, Model, PatchBank};

pub const MATRIX_MAGIC: &[u8; 4] = b"SNMX";
pub const REPORT_HEADER: &str =
    "scheme,cls_norm,token_norm,lambda,target,seed,steps,l_mae_final,cls_uniformity,token_uniformity,cls_effrank,token_effrank,probe_acc";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_ROW_FILE: &str = "report.csv";
pub const CLS_DUMP_FILE: &str = "cls_embeddings.snmx";
pub const TOKEN_DUMP_FILE: &str = "token_embeddings.snmx";
pub const SPECTRA_FILE: &str = "spectra.csv";
pub const DIM_STATS_FILE: &str = "dim_stats.csv";
/// Images per forward pass when embedding a whole split.
const ENCODE_CHUNK: usize = 64;

pub fn matrix_to_bytes(m: &Tensor) -> Vec<u8> {
    assert_eq!(m.rank(), 2);
    let mut out = Vec::with_capacity(12 + 8 * m.numel());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format("missing SNMX header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * rows * cols {
        return Err(Error::Format("SNMX size does not match its header".into()));
    }
    let data = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn load_matrix(path: &Path) -> Result<Tensor> {
    matrix_from_bytes(&fs::read(path)?)
}

/// Writes both splits of a generated dataset into `dir`.
pub fn cmd_gen_data(spec: &SyntheticDatasetSpec, dir: &Path) -> Result<DatasetPair> {
    let pair = generate(spec)?;
    pair.save(dir)?;
    Ok(pair)
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub rows: Vec<LogRow>,
    pub steps: usize,
}

/// Trains on `cfg.data_dir/train.snds`, writing the final checkpoint and the
/// loss log into `cfg.out_dir`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let train = Dataset::load(&cfg.data_dir.join(crate::data::TRAIN_FILE))?;
    fs::create_dir_all(&cfg.out_dir)?;
    let outcome = pretrain(cfg, &train, Some(&cfg.out_dir.join(LAST_GOOD_FILE)))?;
    let ck_path = cfg.out_dir.join(CHECKPOINT_FILE);
    outcome
        .model
        .checkpoint(cfg, outcome.steps_done as u64, &outcome.rng)
        .save(&ck_path)?;
    let log_path = cfg.out_dir.join(TRAIN_LOG_FILE);
    fs::write(&log_path, log_to_csv(&outcome.log))?;
    Ok(PretrainSummary {
        checkpoint: ck_path,
        log: log_path,
        rows: outcome.log,
        steps: outcome.steps_done,
    })
}

/// [CLS] `[N×d]` and token `[N·L×d]` embeddings of every image of `data`,
/// unmasked, eval mode.
pub fn embed_dataset(model: &mut Model, data: &Dataset, stats: (f64, f64)) -> Result<(Tensor, Tensor)> {
    let cfg = model.encoder.config.clone();
    if data.height != cfg.image_side || data.width != cfg.image_side {
        return Err(contract(format!(
            "dataset images are {}×{}, encoder expects {}×{}",
            data.height, data.width, cfg.image_side, cfg.image_side
        )));
    }
    let bank = PatchBank::new(data, cfg.patch_side, stats)?;
    let d = cfg.dim;
    let mut cls = Vec::with_capacity(data.len() * d);
    let mut tokens = Vec::with_capacity(data.len() * cfg.num_patches() * d);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let patches = bank.gather(chunk);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut model.store, Mode::Eval);
        let out = model.encoder.forward_patches(&mut ctx, &patches, None)?;
        cls.extend_from_slice(g.value(out.cls).data());
        tokens.extend_from_slice(g.value(out.tokens).data());
    }
    let n = data.len();
    Ok((Tensor::new(vec![n, d], cls)?, Tensor::new(vec![n * cfg.num_patches(), d], tokens)?))
}

/// Readies a trained model for full-sequence evaluation by re-estimating its
/// BN statistics on the unmasked train split (see
/// [`Model::recalibrate_batch_norm`]), in batches of the training batch size.
pub fn prepare_for_eval(model: &mut Model, pair: &DatasetPair, batch: usize) -> Result<()> {
    model.recalibrate_batch_norm(&pair.train, pair.train.pixel_stats(), batch)
}

/// Probe accuracy of frozen [CLS] embeddings: train on the train split,
/// score on the test split. Expects a model already passed through
/// [`prepare_for_eval`].
pub fn probe_model(model: &mut Model, pair: &DatasetPair, probe: &ProbeConfig) -> Result<f64> {
    let stats = pair.train.pixel_stats();
    let (train_cls, _) = embed_dataset(model, &pair.train, stats)?;
    let (test_cls, _) = embed_dataset(model, &pair.test, stats)?;
    Ok(linear_probe(&train_cls, &pair.train.labels_usize(), &test_cls, &pair.test.labels_usize(), probe)?.accuracy)
}

pub fn cmd_probe(checkpoint: &Path, data_dir: &Path, probe: Option<&ProbeConfig>) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint)?;
    let (mut model, run) = Model::from_checkpoint(&ck, None)?;
    let pair = DatasetPair::load(data_dir)?;
    prepare_for_eval(&mut model, &pair, run.optimizer.batch_size)?;
    probe_model(&mut model, &pair, probe.unwrap_or(&run.probe))
}

/// One report line.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scheme: NormScheme,
    pub lambda: f64,
    pub target: UniformityTarget,
    pub seed: u64,
    pub steps: usize,
    pub l_mae_final: Option<f64>,
    pub cls_uniformity: f64,
    pub token_uniformity: f64,
    pub cls_effrank: f64,
    pub token_effrank: f64,
    pub probe_acc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let variant = if self.scheme.is_sep() { "sep" } else { "share" };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            variant,
            self.scheme.cls_kind().as_str(),
            self.scheme.token_kind().as_str(),
            self.lambda,
            self.target,
            self.seed,
            self.steps,
            opt(self.l_mae_final),
            self.cls_uniformity,
            self.token_uniformity,
            self.cls_effrank,
            self.token_effrank,
            opt(self.probe_acc),
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 13 {
            return Err(Error::Format(format!("report row has {} fields, expected 13", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?} in report row"))) };
        let opt_num = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let scheme: NormScheme = if f[0] == "sep" {
            format!("sep:{}+{}", f[1], f[2]).parse()?
        } else {
            format!("share:{}", f[1]).parse()?
        };
        Ok(Self {
            scheme,
            lambda: num(f[3])?,
            target: f[4].parse()?,
            seed: f[5].parse().map_err(|_| Error::Format("bad seed".into()))?,
            steps: f[6].parse().map_err(|_| Error::Format("bad steps".into()))?,
            l_mae_final: opt_num(f[7])?,
            cls_uniformity: num(f[8])?,
            token_uniformity: num(f[9])?,
            cls_effrank: num(f[10])?,
            token_effrank: num(f[11])?,
            probe_acc: opt_num(f[12])?,
        })
    }
}

pub struct AnalyzeOutcome {
    pub report: AnalysisReport,
    pub row: ReportRow,
    pub cls_embeddings: Tensor,
    pub token_embeddings: Tensor,
}

/// Recalibrates BN statistics, embeds the test split, runs every diagnostic, probes the [CLS]
/// embeddings, and writes dumps, spectra, per-dimension statistics and a
/// one-row report into `out_dir`.
pub fn cmd_analyze(checkpoint: &Path, data_dir: &Path, out_dir: &Path) -> Result<AnalyzeOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let (mut model, run) = Model::from_checkpoint(&ck, None)?;
    let pair = DatasetPair::load(data_dir)?;
    prepare_for_eval(&mut model, &pair, run.optimizer.batch_size)?;
    let stats = pair.train.pixel_stats();
    let (cls, tokens) = embed_dataset(&mut model, &pair.test, stats)?;
    let cls_summary = EmbeddingSummary::compute(&cls, true)?;
    let token_summary = EmbeddingSummary::compute(&tokens, true)?;
    let (train_cls, _) = embed_dataset(&mut model, &pair.train, stats)?;
    let probe = linear_probe(&train_cls, &pair.train.labels_usize(), &cls, &pair.test.labels_usize(), &run.probe)?;

    let l_mae_final = checkpoint
        .parent()
        .map(|p| p.join(TRAIN_LOG_FILE))
        .filter(|p| p.exists())
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|text| text.lines().skip(1).last().and_then(|l| l.split(',').nth(1).and_then(|v| v.parse().ok())));

    let row = ReportRow {
        scheme: run.encoder.norm_scheme,
        lambda: run.objective.lambda,
        target: run.objective.target,
        seed: run.seed,
        steps: ck.step as usize,
        l_mae_final,
        cls_uniformity: cls_summary.uniformity,
        token_uniformity: token_summary.uniformity,
        cls_effrank: cls_summary.effective_rank,
        token_effrank: token_summary.effective_rank,
        probe_acc: Some(probe.accuracy),
    };

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CLS_DUMP_FILE), matrix_to_bytes(&cls))?;
    fs::write(out_dir.join(TOKEN_DUMP_FILE), matrix_to_bytes(&tokens))?;
    fs::write(out_dir.join(SPECTRA_FILE), spectra_csv(&cls_summary, &token_summary))?;
    fs::write(out_dir.join(DIM_STATS_FILE), dim_stats_csv(&cls_summary, &token_summary))?;
    write_atomic(&out_dir.join(REPORT_ROW_FILE), &format!("{REPORT_HEADER}\n{}\n", row.to_csv()))?;

    Ok(AnalyzeOutcome {
        report: AnalysisReport {
            cls: cls_summary,
            token: token_summary,
            probe_accuracy: Some(probe.accuracy),
        },
        row,
        cls_embeddings: cls,
        token_embeddings: tokens,
    })
}

/// `index,cls_sigma,cls_sigma_rel,token_sigma,token_sigma_rel`, where
/// `_rel` divides by the largest singular value. Missing entries are blank.
pub fn spectra_csv(cls: &EmbeddingSummary, token: &EmbeddingSummary) -> String {
    let rel = |s: &[f64], i: usize| -> (String, String) {
        match s.get(i) {
            Some(&v) => {
                let top = s[0];
                (v.to_string(), if top > 0.0 { (v / top).to_string() } else { String::new() })
            }
            None => (String::new(), String::new()),
        }
    };
    let n = cls.singular_values.len().max(token.singular_values.len());
    let mut out = String::from("index,cls_sigma,cls_sigma_rel,token_sigma,token_sigma_rel\n");
    for i in 0..n {
        let (a, b) = rel(&cls.singular_values, i);
        let (c, d) = rel(&token.singular_values, i);
        out.push_str(&format!("{i},{a},{b},{c},{d}\n"));
    }
    out
}

pub fn dim_stats_csv(cls: &EmbeddingSummary, token: &EmbeddingSummary) -> String {
    let mut out = String::from("dim,cls_mean,cls_std,token_mean,token_std\n");
    for (i, (c, t)) in cls.dim_stats.iter().zip(&token.dim_stats).enumerate() {
        out.push_str(&format!("{i},{},{},{},{}\n", c.mean, c.std, t.mean, t.std));
    }
    out
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Cross-product of schemes × λ × targets × seeds on top of a base config.
#[derive(Clone, Debug)]
pub struct GridConfig {
    pub base: RunConfig,
    pub schemes: Vec<NormScheme>,
    pub lambdas: Vec<f64>,
    pub targets: Vec<UniformityTarget>,
    pub seeds: Vec<u64>,
}

impl GridConfig {
    /// 4 schemes × λ ∈ {0, 0.01, 0.1, 1} × {token, cls, both}, one seed.
    pub fn full_grid(base: RunConfig) -> Self {
        Self {
            base,
            schemes: NormScheme::ABLATION.to_vec(),
            lambdas: vec![0.0, 0.01, 0.1, 1.0],
            targets: UniformityTarget::ACTIVE.to_vec(),
            seeds: vec![0],
        }
    }

    /// Every cell's run configuration, in report order. λ = 0 collapses the
    /// targets into a single `none` cell.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for &lambda in &self.lambdas {
                let targets: Vec<UniformityTarget> = if lambda == 0.0 {
                    vec![UniformityTarget::None]
                } else {
                    self.targets.iter().copied().filter(|&t| t != UniformityTarget::None).collect()
                };
                for target in targets {
                    for &seed in &self.seeds {
                        let mut c = self.base.clone();
                        c.encoder.norm_scheme = scheme;
                        c.objective.lambda = lambda;
                        c.objective.target = target;
                        c.seed = seed;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AblateSummary {
    pub report: PathBuf,
    pub rows: Vec<ReportRow>,
    pub cells_trained: usize,
    pub cells_reused: usize,
    pub steps_executed: usize,
}

pub fn cell_dir(out_root: &Path, cfg: &RunConfig) -> PathBuf {
    out_root.join("cells").join(cfg.content_key())
}

/// Runs (or reuses) every cell of the grid and writes `report.csv` under
/// `out_root`. A cell counts as done once its report row exists; unfinished
/// cells are recomputed from scratch.
pub fn cmd_ablate(grid: &GridConfig, out_root: &Path) -> Result<AblateSummary> {
    let mut rows = Vec::new();
    let (mut trained, mut reused, mut steps) = (0, 0, 0);
    for mut cell in grid.cells() {
        let dir = cell_dir(out_root, &cell);
        let row_path = dir.join(REPORT_ROW_FILE);
        if row_path.exists() {
            let text = fs::read_to_string(&row_path)?;
            let line = text.lines().nth(1).ok_or_else(|| Error::Format(format!("empty report row in {}", row_path.display())))?;
            rows.push(ReportRow::from_csv(line)?);
            reused += 1;
            continue;
        }
        cell.out_dir = dir.clone();
        let summary = cmd_pretrain(&cell)?;
        steps += summary.steps;
        let analyzed = cmd_analyze(&summary.checkpoint, &cell.data_dir, &dir)?;
        rows.push(analyzed.row);
        trained += 1;
    }
    fs::create_dir_all(out_root)?;
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    let report = out_root.join("report.csv");
    write_atomic(&report, &text)?;
    Ok(AblateSummary {
        report,
        rows,
        cells_trained: trained,
        cells_reused: reused,
        steps_executed: steps,
    })
}
