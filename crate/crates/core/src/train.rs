//! Model bundle, SGD with momentum, and the pretraining loop.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{OptimizerConfig, RunConfig};
use crate::data::Dataset;
use crate::encoder::{patchify_batch, Encoder};
use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::nn::{Ctx, Mode};
use crate::objectives::{sample_mask, u_mae_loss, Decoder};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Encoder, decoder and the store holding all of their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let enc_cfg = cfg.encoder_config();
        let mut store = ParamStore::new();
        let encoder = Encoder::new(enc_cfg.clone(), &mut store)?;
        let decoder = Decoder::new(&mut store, &enc_cfg, &cfg.objective)?;
        Ok(Self { store, encoder, decoder })
    }

    /// Re-estimates every BN running statistic from unmasked `data`, in
    /// order, `batch` images at a time, with the weights frozen. Each
    /// buffer ends up as the plain average of the per-batch statistics.
    ///
    /// Pretraining only ever shows the encoder masked sequences, so the
    /// running statistics it collects do not describe full-sequence
    /// inputs. A trailing partial batch is dropped; models without BN
    /// are left untouched.
    pub fn recalibrate_batch_norm(&mut self, data: &Dataset, stats: (f64, f64), batch: usize) -> Result<()> {
        if !self.store.iter().any(|p| !p.trainable) {
            return Ok(());
        }
        if batch < 2 || data.len() < batch {
            return Err(contract(format!(
                "recalibration needs batches of at least 2 from {} images, asked for {batch}",
                data.len()
            )));
        }
        let bank = PatchBank::new(data, self.encoder.config.patch_side, stats)?;
        let all: Vec<usize> = (0..data.len()).collect();
        for (k, chunk) in all.chunks_exact(batch).enumerate() {
            let patches = bank.gather(chunk);
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &mut self.store, Mode::Train);
            ctx.bn_momentum = Some(1.0 / (k + 1) as f64);
            self.encoder.forward_patches(&mut ctx, &patches, None)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, cfg: &RunConfig, step: u64, rng: &ChaCha8Rng) -> Checkpoint {
        Checkpoint::from_store(&self.store, cfg.canonical(), step, RngState::capture(rng))
    }

    /// Rebuilds a model from a checkpoint. When `expected` is given its
    /// encoder configuration must match the one echoed in the file.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<(Self, RunConfig)> {
        let echoed = RunConfig::from_kv_str(&ck.echo)?;
        if let Some(exp) = expected {
            if exp.encoder_config() != echoed.encoder_config() {
                return Err(contract(format!(
                    "checkpoint encoder configuration does not match:\n--- checkpoint\n{}--- expected\n{}",
                    echoed.canonical(),
                    exp.canonical()
                )));
            }
        }
        let mut model = Self::new(&echoed)?;
        ck.apply_to(&mut model.store)?;
        Ok((model, echoed))
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g + wd·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: OptimizerConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let velocity = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { cfg, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = store.grad(id).clone();
            let value = store.value_mut(id);
            for ((w, v), g) in value.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                *v = self.cfg.momentum * *v + g + self.cfg.weight_decay * *w;
                *w -= self.cfg.lr * *v;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_mae: f64,
    pub l_u: Option<f64>,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,l_mae,l_u,total";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let lu = self.l_u.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.l_mae, lu, self.total)
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Standardized, patchified training images, prepared once.
pub struct PatchBank {
    pub patches: Tensor,
    pub stats: (f64, f64),
}

impl PatchBank {
    pub fn new(data: &Dataset, patch_side: usize, stats: (f64, f64)) -> Result<Self> {
        let all: Vec<usize> = (0..data.len()).collect();
        let patches = patchify_batch(&data.batch(&all, stats), patch_side)?;
        Ok(Self { patches, stats })
    }

    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let s = self.patches.shape();
        let per = s[1] * s[2];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.patches.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), s[1], s[2]], data).expect("gather shape")
    }
}

pub struct PretrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub rng: ChaCha8Rng,
    pub steps_done: usize,
}

/// Runs `cfg.optimizer.steps` U-MAE updates on `train`. When the loss turns
/// non-finite the parameters from before that step are written to
/// `last_good` (if given) and a numerical error is returned.
pub fn pretrain(cfg: &RunConfig, train: &Dataset, last_good: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let enc = cfg.encoder_config();
    if train.height != enc.image_side || train.width != enc.image_side {
        return Err(contract(format!(
            "dataset images are {}×{}, encoder expects {}×{}",
            train.height, train.width, enc.image_side, enc.image_side
        )));
    }
    let batch = cfg.optimizer.batch_size;
    if train.len() < batch {
        return Err(contract(format!("batch size {batch} exceeds the {} training images", train.len())));
    }
    let mut model = Model::new(cfg)?;
    let bank = PatchBank::new(train, enc.patch_side, train.pixel_stats())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut opt = Sgd::new(cfg.optimizer.clone(), &model.store);
    let mut log = Vec::with_capacity(cfg.optimizer.steps);

    for step in 0..cfg.optimizer.steps {
        let rng_before = rng.clone();
        let idx = sample(&mut rng, train.len(), batch).into_vec();
        let patches = bank.gather(&idx);
        let plan = sample_mask(batch, enc.num_patches(), cfg.objective.mask_ratio, &mut rng)?;

        let snapshot = model.store.clone();
        let mut g = Graph::new();
        let parts = {
            let mut ctx = Ctx::new(&mut g, &mut model.store, Mode::Train);
            u_mae_loss(&mut ctx, &model.encoder, &model.decoder, &patches, &plan, &cfg.objective)?
        };
        let total = g.value(parts.total).item();
        let l_mae = g.value(parts.l_mae).item();
        let l_u = parts.l_u.map(|v| g.value(v).item());
        if !total.is_finite() {
            let mut where_saved = String::new();
            if let Some(path) = last_good {
                Checkpoint::from_store(&snapshot, cfg.canonical(), step as u64, RngState::capture(&rng_before)).save(path)?;
                where_saved = format!("; last good parameters saved to {}", path.display());
            }
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step}: l_mae={l_mae}, l_u={l_u:?}, total={total}{where_saved}"
            )));
        }
        g.backward(parts.total)?;
        model.store.zero_grad();
        model.store.accumulate_grads(&g);
        opt.step(&mut model.store);
        log.push(LogRow {
            step,
            l_mae,
            l_u,
            total,
        });
    }
    Ok(PretrainOutcome {
        model,
        log,
        rng,
        steps_done: cfg.optimizer.steps,
    })
}
