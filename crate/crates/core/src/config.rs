//! Run configuration and its plain-text `key=value` form.
//!
//! ```text
//! # comments and blank lines are ignored
//! norm = sep:bn+ln
//! lambda = 0.1
//! target = cls
//! steps = 2000
//! ```
//!
//! Recognized keys: `image_side patch_side dim depth heads mlp_ratio norm
//! mask_ratio lambda target decoder_depth decoder_dim decoder_heads lr
//! momentum weight_decay steps batch_size seed probe_epochs probe_lr data
//! out`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::analysis::ProbeConfig;
use crate::encoder::EncoderConfig;
use crate::error::{config, Result};
use crate::objectives::ObjectiveConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SEPNORM_OUT";

/// SGD with momentum at a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub probe: ProbeConfig,
    /// Seeds model init, batch order and masking.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        Self {
            encoder: EncoderConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: out,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "image_side" => self.encoder.image_side = parse(key, v)?,
            "patch_side" => self.encoder.patch_side = parse(key, v)?,
            "dim" => self.encoder.dim = parse(key, v)?,
            "depth" => self.encoder.depth = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "norm" => self.encoder.norm_scheme = v.parse()?,
            "mask_ratio" => self.objective.mask_ratio = parse(key, v)?,
            "lambda" => self.objective.lambda = parse(key, v)?,
            "target" => self.objective.target = v.parse()?,
            "decoder_depth" => self.objective.decoder_depth = parse(key, v)?,
            "decoder_dim" => self.objective.decoder_dim = parse(key, v)?,
            "decoder_heads" => self.objective.decoder_heads = parse(key, v)?,
            "lr" => self.optimizer.lr = parse(key, v)?,
            "momentum" => self.optimizer.momentum = parse(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "steps" => self.optimizer.steps = parse(key, v)?,
            "batch_size" => self.optimizer.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "probe_epochs" => self.probe.epochs = parse(key, v)?,
            "probe_lr" => self.probe.lr = parse(key, v)?,
            "data" => self.data_dir = PathBuf::from(v),
            "out" => self.out_dir = PathBuf::from(v),
            other => return Err(config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv_str(&fs::read_to_string(path)?)
    }

    /// The encoder config actually used: its seed is the run seed.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: self.seed,
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.objective.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(config("optimizer needs lr > 0, momentum in [0, 1) and weight_decay ≥ 0"));
        }
        if o.batch_size < 2 {
            return Err(config("batch_size must be at least 2"));
        }
        Ok(())
    }

    /// Canonical text of every setting that affects results (paths
    /// excluded). Used as the checkpoint echo and for run hashing.
    pub fn canonical(&self) -> String {
        let e = self.encoder_config();
        let o = &self.objective;
        let p = &self.optimizer;
        format!(
            "image_side={}\npatch_side={}\ndim={}\ndepth={}\nheads={}\nmlp_ratio={}\nnorm={}\n\
             mask_ratio={}\nlambda={}\ntarget={}\ndecoder_depth={}\ndecoder_dim={}\ndecoder_heads={}\n\
             lr={}\nmomentum={}\nweight_decay={}\nsteps={}\nbatch_size={}\nseed={}\n\
             probe_epochs={}\nprobe_lr={}\n",
            e.image_side,
            e.patch_side,
            e.dim,
            e.depth,
            e.heads,
            e.mlp_ratio,
            e.norm_scheme,
            o.mask_ratio,
            o.lambda,
            o.target,
            o.decoder_depth,
            o.decoder_dim,
            o.decoder_heads,
            p.lr,
            p.momentum,
            p.weight_decay,
            p.steps,
            p.batch_size,
            self.seed,
            self.probe.epochs,
            self.probe.lr,
        )
    }

    /// Short content hash of [`RunConfig::canonical`] plus the data path.
    pub fn content_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.update(b"data=");
        h.update(self.data_dir.to_string_lossy().as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}
