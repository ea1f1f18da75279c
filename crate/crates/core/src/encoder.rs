//! Vision-transformer-style encoder with a [CLS] symbol at position 0 and a
//! configurable normalization scheme at every norm site.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Error, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Linear, INIT_STD};
use crate::norm::{NormKind, NormScheme, NormSite};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub norm_scheme: NormScheme,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            norm_scheme: NormScheme::Share(NormKind::Ln),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// d=8, depth=2, heads=2 on 8×8 images with 4×4 patches.
    pub fn tiny(norm_scheme: NormScheme) -> Self {
        Self {
            image_side: 8,
            patch_side: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            norm_scheme,
            seed: 7,
        }
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.depth == 0 {
            return Err(config("encoder depth must be at least 1"));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(config(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Canonical `key=value` lines; used for checkpoint echo and run hashing.
    pub fn to_kv(&self) -> String {
        format!(
            "image_side={}\npatch_side={}\ndim={}\ndepth={}\nheads={}\nmlp_ratio={}\nnorm={}\nseed={}\n",
            self.image_side, self.patch_side, self.dim, self.depth, self.heads, self.mlp_ratio, self.norm_scheme, self.seed
        )
    }
}

/// Splits a square image `[side×side]` into non-overlapping row-major
/// patches, each flattened row-major: `[L × patch²]`.
pub fn patchify(image: &Tensor, patch_side: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![patch_side],
        });
    }
    let side = s[0];
    if patch_side == 0 || !side.is_multiple_of(patch_side) {
        return Err(config(format!("image side {side} is not divisible by patch side {patch_side}")));
    }
    let per = side / patch_side;
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for pr in 0..per {
        for pc in 0..per {
            for r in 0..patch_side {
                let row = pr * patch_side + r;
                let start = row * side + pc * patch_side;
                out.extend_from_slice(&d[start..start + patch_side]);
            }
        }
    }
    Tensor::new(vec![per * per, patch_side * patch_side], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch_side: usize) -> Result<Tensor> {
    let s = patches.shape();
    let per = (s.first().copied().unwrap_or(0) as f64).sqrt().round() as usize;
    if s.len() != 2 || per * per != s[0] || s[1] != patch_side * patch_side {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: s.to_vec(),
            rhs: vec![patch_side],
        });
    }
    let side = per * patch_side;
    let mut out = vec![0.0; side * side];
    for (l, patch) in patches.data().chunks(patch_side * patch_side).enumerate() {
        let (pr, pc) = (l / per, l % per);
        for r in 0..patch_side {
            let start = (pr * patch_side + r) * side + pc * patch_side;
            out[start..start + patch_side].copy_from_slice(&patch[r * patch_side..(r + 1) * patch_side]);
        }
    }
    Tensor::new(vec![side, side], out)
}

/// Patchifies every image of `[B×H×W]` into `[B×L×patch²]`.
pub fn patchify_batch(images: &Tensor, patch_side: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "patchify_batch",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(images.numel());
    let mut shape = Vec::new();
    for i in 0..b {
        let img = Tensor::new(vec![h, w], images.data()[i * h * w..(i + 1) * h * w].to_vec())?;
        let p = patchify(&img, patch_side)?;
        shape = p.shape().to_vec();
        data.extend(p.into_data());
    }
    Tensor::new(vec![b, shape[0], shape[1]], data)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Multi-head scaled dot-product self-attention over `x: [B×S×d]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let split = |ctx: &mut Ctx, t: Var| -> Result<Var> {
            let t = ctx.graph.reshape(t, &[b, s, h, dh])?;
            let t = ctx.graph.permute(t, &[0, 2, 1, 3])?;
            ctx.graph.reshape(t, &[b * h, s, dh])
        };
        let q = self.q.forward(ctx, x)?;
        let q = split(ctx, q)?;
        let k = self.k.forward(ctx, x)?;
        let k = split(ctx, k)?;
        let v = self.v.forward(ctx, x)?;
        let v = split(ctx, v)?;
        let kt = ctx.graph.transpose_last(k)?;
        let scores = ctx.graph.batch_matmul(q, kt)?;
        let scores = ctx.graph.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let weights = ctx.graph.softmax(scores, 2)?;
        let mixed = ctx.graph.batch_matmul(weights, v)?;
        let mixed = ctx.graph.reshape(mixed, &[b, h, s, dh])?;
        let mixed = ctx.graph.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = ctx.graph.reshape(mixed, &[b, s, d])?;
        self.o.forward(ctx, mixed)
    }
}

/// Pre-norm transformer block:
/// `x + Attn(norm1(x))`, then `· + MLP(norm2(·))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: NormSite,
    pub attn: Attention,
    pub norm2: NormSite,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, scheme: NormScheme, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: NormSite::new(store, &format!("{name}.norm1"), scheme, dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: NormSite::new(store, &format!("{name}.norm2"), scheme, dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        if ctx.graph.shape(x).len() != 3 || ctx.graph.shape(x)[1] < 2 {
            return Err(contract(format!("attention block needs [B×S×d] with S ≥ 2, got {:?}", ctx.graph.shape(x))));
        }
        let h = self.norm1.apply(ctx, x)?;
        let a = self.attn.forward(ctx, h)?;
        let x = ctx.graph.add(x, a)?;
        let h = self.norm2.apply(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.graph.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        ctx.graph.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: NormSite,
}

/// Encoder outputs after the final norm.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B×d]`
    pub cls: Var,
    /// `[B×L′×d]`
    pub tokens: Var,
    /// `[B×(L′+1)×d]`, position 0 is [CLS].
    pub sequence: Var,
}

impl Encoder {
    /// Registers every encoder parameter under `encoder.*`, initialized from
    /// `config.seed`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, store))
    }

    /// Like [`Encoder::new`] but accepts `depth == 0`.
    #[doc(hidden)]
    pub fn new_unchecked_depth(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate_shape()?;
        Ok(Self::build(config, store))
    }

    fn build(config: EncoderConfig, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let l = config.num_patches();
        let patch_embed = Linear::new(store, "encoder.patch_embed", config.patch_len(), d, &mut rng);
        let cls_token = store.add("encoder.cls_token", trunc_normal(&mut rng, vec![d], INIT_STD));
        let pos_embed = store.add("encoder.pos_embed", trunc_normal(&mut rng, vec![l + 1, d], INIT_STD));
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("encoder.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_hidden(),
                    config.norm_scheme,
                    &mut rng,
                )
            })
            .collect();
        let final_norm = NormSite::new(store, "encoder.norm", config.norm_scheme, d);
        Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_norm,
        }
    }

    /// Encodes pre-patchified input `patches: [B×L×patch²]`, keeping only the
    /// patch indices in `kept[b]` for sequence `b` (all of them when `kept`
    /// is `None`). Every sequence must keep the same number of patches.
    pub fn forward_patches(&self, ctx: &mut Ctx, patches: &Tensor, kept: Option<&[Vec<usize>]>) -> Result<Encoded> {
        let s = patches.shape();
        let (l, p2) = (self.config.num_patches(), self.config.patch_len());
        if s.len() != 3 || s[1] != l || s[2] != p2 {
            return Err(Error::Shape {
                op: "encode",
                lhs: s.to_vec(),
                rhs: vec![l, p2],
            });
        }
        let b = s[0];
        let all: Vec<Vec<usize>>;
        let kept = match kept {
            Some(k) => k,
            None => {
                all = vec![(0..l).collect(); b];
                &all
            }
        };
        if kept.len() != b {
            return Err(contract(format!("mask covers {} sequences, batch has {b}", kept.len())));
        }
        let n_kept = kept[0].len();
        if n_kept == 0 {
            return Err(contract("every patch is masked; nothing to encode"));
        }
        if kept.iter().any(|k| k.len() != n_kept || k.iter().any(|&i| i >= l)) {
            return Err(contract("kept index sets must be in range and of equal size"));
        }
        let d = self.config.dim;
        let flat_rows: Vec<usize> = kept.iter().enumerate().flat_map(|(bi, k)| k.iter().map(move |&i| bi * l + i)).collect();
        let pos_rows: Vec<usize> = kept.iter().flat_map(|k| k.iter().map(|&i| i + 1)).collect();

        let g = &mut *ctx.graph;
        let x = g.constant(patches.clone().reshape(vec![b * l, p2])?);
        let x = g.index_select(x, 0, &flat_rows)?;
        let x = self.patch_embed.forward(ctx, x)?;
        let pos = ctx.p(self.pos_embed);
        let pos_tok = ctx.graph.index_select(pos, 0, &pos_rows)?;
        let x = ctx.graph.add(x, pos_tok)?;
        let x = ctx.graph.reshape(x, &[b, n_kept, d])?;

        let cls = ctx.p(self.cls_token);
        let pos0 = ctx.graph.index_select(pos, 0, &[0])?;
        let cls = ctx.graph.add(pos0, cls)?;
        let cls = ctx.graph.index_select(cls, 0, &vec![0; b])?;
        let cls = ctx.graph.reshape(cls, &[b, 1, d])?;
        let mut h = ctx.graph.concat(&[cls, x], 1)?;

        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        let h = self.final_norm.apply(ctx, h)?;
        let cls = ctx.graph.index_select(h, 1, &[0])?;
        let cls = ctx.graph.reshape(cls, &[b, d])?;
        let tok_idx: Vec<usize> = (1..=n_kept).collect();
        let tokens = ctx.graph.index_select(h, 1, &tok_idx)?;
        Ok(Encoded {
            cls,
            tokens,
            sequence: h,
        })
    }

    /// Encodes raw images `[B×H×W]`.
    pub fn encode(&self, ctx: &mut Ctx, images: &Tensor, kept: Option<&[Vec<usize>]>) -> Result<Encoded> {
        let s = images.shape();
        if s.len() != 3 || s[1] != self.config.image_side || s[2] != self.config.image_side {
            return Err(Error::Shape {
                op: "encode",
                lhs: s.to_vec(),
                rhs: vec![self.config.image_side, self.config.image_side],
            });
        }
        let patches = patchify_batch(images, self.config.patch_side)?;
        self.forward_patches(ctx, &patches, kept)
    }

    /// Every norm site, final norm last.
    pub fn norm_sites(&self) -> Vec<&NormSite> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.norm1, &b.norm2])
            .chain(std::iter::once(&self.final_norm))
            .collect()
    }
}
