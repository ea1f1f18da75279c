//! Synthetic image datasets and the `SNDS` file format.
//!
//! `SNDS` layout, little-endian:
//!
//! ```text
//! offset  size           field
//! 0       4              magic "SNDS"
//! 4       4              u32 count
//! 8       4              u32 height
//! 12      4              u32 width
//! 16      4              u32 classes
//! 20      count·h·w      u8 pixels, image-major then row-major
//! ...     count          u8 label per image
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SNDS";
pub const TRAIN_FILE: &str = "train.snds";
pub const TEST_FILE: &str = "test.snds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    /// Class-dependent low-frequency pattern and brightness plus pixel noise.
    ClassBlobs,
    /// Class-dependent oriented high-frequency stripes with random phase.
    Textures,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::ClassBlobs => "class-blobs",
            DatasetKind::Textures => "textures",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "class-blobs" | "blobs" => Ok(Self::ClassBlobs),
            "textures" => Ok(Self::Textures),
            other => Err(config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub image_side: usize,
    /// Pixel noise standard deviation, relative to the pattern amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::ClassBlobs,
            classes: 4,
            train_count: 256,
            test_count: 256,
            image_side: 16,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.classes) {
            return Err(config("classes must be between 2 and 255"));
        }
        if !self.train_count.is_multiple_of(self.classes) || !self.test_count.is_multiple_of(self.classes) {
            return Err(config(format!(
                "split sizes {}/{} must be multiples of the class count {} to stay balanced",
                self.train_count, self.test_count, self.classes
            )));
        }
        if self.train_count == 0 || self.test_count == 0 || self.image_side == 0 {
            return Err(config("dataset sizes must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(config("noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.pixels.len() + self.labels.len());
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), self.height, self.width, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format("missing SNDS header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (count, height, width, classes) = (word(0), word(1), word(2), word(3));
        let npix = count * height * width;
        if bytes.len() != 20 + npix + count {
            return Err(Error::Format(format!(
                "SNDS body is {} bytes, header implies {}",
                bytes.len() - 20,
                npix + count
            )));
        }
        let pixels = bytes[20..20 + npix].to_vec();
        let labels = bytes[20 + npix..].to_vec();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Pixel mean and standard deviation over the whole split.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
        let var = self.pixels.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt().max(1e-6))
    }

    /// Images `indices` as `[B×H×W]`, standardized with `(mean, std)`.
    pub fn batch(&self, indices: &[usize], stats: (f64, f64)) -> Tensor {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| (p as f64 - stats.0) / stats.1));
        }
        Tensor::new(vec![indices.len(), self.height, self.width], data).expect("batch shape")
    }
}

/// Train and test splits of one generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetPair {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.train.save(&dir.join(TRAIN_FILE))?;
        self.test.save(&dir.join(TEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::load(&dir.join(TRAIN_FILE))?,
            test: Dataset::load(&dir.join(TEST_FILE))?,
        })
    }
}

fn to_pixel(v: f64) -> u8 {
    (128.0 + 40.0 * v).round().clamp(0.0, 255.0) as u8
}

fn render<R: Rng>(spec: &SyntheticDatasetSpec, class: usize, rng: &mut R) -> Vec<u8> {
    let side = spec.image_side;
    let c = spec.classes as f64;
    let frac = class as f64 / c;
    let mut img = Vec::with_capacity(side * side);
    match spec.kind {
        DatasetKind::ClassBlobs => {
            // one smooth bump per class, its centre on a circle, plus a
            // class-dependent brightness offset
            let angle = std::f64::consts::TAU * frac + rng.gen_range(-0.25..0.25);
            let radius = 0.28 * side as f64;
            let centre = side as f64 / 2.0 - 0.5;
            let (cx, cy) = (centre + radius * angle.cos(), centre + radius * angle.sin());
            let width = 0.22 * side as f64;
            let amp = rng.gen_range(1.6..2.4);
            let offset = 0.8 * (frac - 0.5) + 0.15 * rng.sample::<f64, _>(StandardNormal);
            for r in 0..side {
                for col in 0..side {
                    let d2 = (r as f64 - cy).powi(2) + (col as f64 - cx).powi(2);
                    let bump = amp * (-d2 / (2.0 * width * width)).exp();
                    let noise: f64 = StandardNormal.sample(rng);
                    img.push(to_pixel(bump - 0.5 + offset + spec.noise * noise));
                }
            }
        }
        DatasetKind::Textures => {
            let angle = std::f64::consts::PI * frac;
            let freq = 2.0 * std::f64::consts::PI / 3.0;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (kx, ky) = (angle.cos() * freq, angle.sin() * freq);
            for r in 0..side {
                for col in 0..side {
                    let noise: f64 = StandardNormal.sample(rng);
                    let v = (kx * col as f64 + ky * r as f64 + phase).sin();
                    img.push(to_pixel(v + spec.noise * noise));
                }
            }
        }
    }
    img
}

fn generate_split<R: Rng>(spec: &SyntheticDatasetSpec, count: usize, rng: &mut R) -> Dataset {
    let mut pixels = Vec::with_capacity(count * spec.image_side * spec.image_side);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.classes;
        pixels.extend(render(spec, class, rng));
        labels.push(class as u8);
    }
    Dataset {
        height: spec.image_side,
        width: spec.image_side,
        classes: spec.classes,
        pixels,
        labels,
    }
}

/// Generates balanced train and test splits, deterministic in `spec.seed`.
/// The two splits draw from separate RNG streams.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<DatasetPair> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(2);
    Ok(DatasetPair {
        train: generate_split(spec, spec.train_count, &mut train_rng),
        test: generate_split(spec, spec.test_count, &mut test_rng),
    })
}
