//! Masked-reconstruction loss, the uniformity loss on unit-normalized
//! embeddings, and their weighted sum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Block, Encoded, Encoder, EncoderConfig};
use crate::error::{config, contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, Linear, INIT_STD};
use crate::norm::{NormKind, NormScheme, NormSite};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which embeddings feed the uniformity term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UniformityTarget {
    None,
    Cls,
    Token,
    Both,
}

impl UniformityTarget {
    pub const ACTIVE: [UniformityTarget; 3] = [UniformityTarget::Token, UniformityTarget::Cls, UniformityTarget::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            UniformityTarget::None => "none",
            UniformityTarget::Cls => "cls",
            UniformityTarget::Token => "token",
            UniformityTarget::Both => "both",
        }
    }
}

impl fmt::Display for UniformityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UniformityTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "cls" => Ok(Self::Cls),
            "token" | "tokens" => Ok(Self::Token),
            "both" | "cls+token" => Ok(Self::Both),
            other => Err(config(format!("unknown uniformity target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub mask_ratio: f64,
    pub lambda: f64,
    pub target: UniformityTarget,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            lambda: 0.0,
            target: UniformityTarget::None,
            decoder_depth: 2,
            decoder_dim: 32,
            decoder_heads: 4,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(config(format!("mask ratio {} is outside [0, 1)", self.mask_ratio)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config(format!("lambda {} must be a finite non-negative number", self.lambda)));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(config("decoder dim must be divisible by decoder heads"));
        }
        Ok(())
    }

    /// Whether the uniformity term contributes at all.
    pub fn uniformity_active(&self) -> bool {
        self.lambda > 0.0 && self.target != UniformityTarget::None
    }
}

/// Kept and masked patch indices for every sequence of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub num_patches: usize,
    /// Ascending kept indices per sequence.
    pub kept: Vec<Vec<usize>>,
    /// Ascending masked indices per sequence.
    pub masked: Vec<Vec<usize>>,
}

impl MaskPlan {
    /// Keeps every patch.
    pub fn unmasked(batch: usize, num_patches: usize) -> Self {
        Self {
            num_patches,
            kept: vec![(0..num_patches).collect(); batch],
            masked: vec![Vec::new(); batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.kept.len()
    }

    pub fn num_kept(&self) -> usize {
        self.kept.first().map_or(0, Vec::len)
    }

    pub fn num_masked(&self) -> usize {
        self.masked.first().map_or(0, Vec::len)
    }
}

/// Draws `round(mask_ratio·L)` masked patches per sequence, uniformly
/// without replacement.
pub fn sample_mask<R: Rng + ?Sized>(batch: usize, num_patches: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(contract(format!("mask ratio {mask_ratio} is outside [0, 1)")));
    }
    let n_masked = (mask_ratio * num_patches as f64).round() as usize;
    if n_masked >= num_patches {
        return Err(contract(format!(
            "mask ratio {mask_ratio} masks all {num_patches} patches"
        )));
    }
    let mut kept = Vec::with_capacity(batch);
    let mut masked = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut m = rand::seq::index::sample(rng, num_patches, n_masked).into_vec();
        m.sort_unstable();
        let mut is_masked = vec![false; num_patches];
        for &i in &m {
            is_masked[i] = true;
        }
        kept.push((0..num_patches).filter(|&i| !is_masked[i]).collect());
        masked.push(m);
    }
    Ok(MaskPlan {
        num_patches,
        kept,
        masked,
    })
}

/// Lightweight reconstruction decoder. Always uses shared LN.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: NormSite,
    pub pred: Linear,
    pub num_patches: usize,
    pub dim: usize,
}

impl Decoder {
    /// Registers parameters under `decoder.*`. Initialization is seeded from
    /// the encoder seed so one seed fixes the whole model.
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, obj: &ObjectiveConfig) -> Result<Self> {
        obj.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(enc.seed ^ 0xDEC0_DE00_0000_0001);
        let dd = obj.decoder_dim;
        let l = enc.num_patches();
        let scheme = NormScheme::Share(NormKind::Ln);
        let embed = Linear::new(store, "decoder.embed", enc.dim, dd, &mut rng);
        let mask_token = store.add("decoder.mask_token", trunc_normal(&mut rng, vec![dd], INIT_STD));
        let pos_embed = store.add("decoder.pos_embed", trunc_normal(&mut rng, vec![l + 1, dd], INIT_STD));
        let blocks = (0..obj.decoder_depth)
            .map(|i| Block::new(store, &format!("decoder.blocks.{i}"), dd, obj.decoder_heads, dd * 2, scheme, &mut rng))
            .collect();
        let norm = NormSite::new(store, "decoder.norm", scheme, dd);
        let pred = Linear::new(store, "decoder.pred", dd, enc.patch_len(), &mut rng);
        Ok(Self {
            embed,
            mask_token,
            pos_embed,
            blocks,
            norm,
            pred,
            num_patches: l,
            dim: dd,
        })
    }

    /// Predicts every patch, `[B×L×patch²]`. Kept positions carry their
    /// encoded token, masked positions the shared mask embedding; the
    /// encoded [CLS] sits at position 0.
    pub fn forward(&self, ctx: &mut Ctx, encoded: &Encoded, plan: &MaskPlan) -> Result<Var> {
        let b = plan.batch();
        let k = plan.num_kept();
        let l = self.num_patches;
        let dd = self.dim;
        let seq = self.embed.forward(ctx, encoded.sequence)?;
        let seq = ctx.graph.reshape(seq, &[b * (k + 1), dd])?;
        let mask = ctx.p(self.mask_token);
        let mask = ctx.graph.reshape(mask, &[1, dd])?;
        let rows = ctx.graph.concat(&[seq, mask], 0)?;
        let mask_row = b * (k + 1);
        let mut order = Vec::with_capacity(b * (l + 1));
        for (bi, kept) in plan.kept.iter().enumerate() {
            let mut slot = vec![mask_row; l];
            for (j, &i) in kept.iter().enumerate() {
                slot[i] = bi * (k + 1) + 1 + j;
            }
            order.push(bi * (k + 1));
            order.extend(slot);
        }
        let full = ctx.graph.index_select(rows, 0, &order)?;
        let full = ctx.graph.reshape(full, &[b, l + 1, dd])?;
        let pos = ctx.p(self.pos_embed);
        let mut h = ctx.graph.add(full, pos)?;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        let h = self.norm.apply(ctx, h)?;
        let h = self.pred.forward(ctx, h)?;
        let patches: Vec<usize> = (1..=l).collect();
        ctx.graph.index_select(h, 1, &patches)
    }
}

/// Mean squared error between `pred: [B×L×P]` and `target: [B×L×P]` over the
/// masked patches of `plan` only.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Tensor, plan: &MaskPlan) -> Result<Var> {
    let s = target.shape().to_vec();
    if g.shape(pred) != s.as_slice() || s.len() != 3 || s[0] != plan.batch() || s[1] != plan.num_patches {
        return Err(Error::Shape {
            op: "masked_mse",
            lhs: g.shape(pred).to_vec(),
            rhs: s,
        });
    }
    if plan.num_masked() == 0 {
        return Err(contract("reconstruction loss needs at least one masked patch"));
    }
    let (l, p) = (s[1], s[2]);
    let rows: Vec<usize> = plan
        .masked
        .iter()
        .enumerate()
        .flat_map(|(bi, m)| m.iter().map(move |&i| bi * l + i))
        .collect();
    let flat = g.reshape(pred, &[s[0] * l, p])?;
    let picked = g.index_select(flat, 0, &rows)?;
    let tgt: Vec<f64> = rows.iter().flat_map(|&r| target.data()[r * p..(r + 1) * p].iter().copied()).collect();
    let tgt = g.constant(Tensor::new(vec![rows.len(), p], tgt)?);
    let diff = g.sub(picked, tgt)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}

/// Reconstruction loss: encode the kept patches, decode every position and
/// score the masked ones. `patches` is `[B×L×patch²]`.
pub fn mae_loss(ctx: &mut Ctx, encoder: &Encoder, decoder: &Decoder, patches: &Tensor, plan: &MaskPlan) -> Result<Var> {
    let encoded = encoder.forward_patches(ctx, patches, Some(&plan.kept))?;
    let pred = decoder.forward(ctx, &encoded, plan)?;
    masked_mse(ctx.graph, pred, patches, plan)
}

/// Uniformity loss on `emb: [N×d]`:
/// `log( 2/(N(N−1)) · Σ_{n<m} exp(−2‖ĥ_n − ĥ_m‖²) )` with `ĥ = h/‖h‖`.
///
/// Squared chordal distances come from the Gram matrix of the unit rows as
/// `G_nn + G_mm − 2·G_nm`, and the log-mean is evaluated with max
/// subtraction.
pub fn uniformity_loss(g: &mut Graph, emb: Var) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "uniformity_loss",
            lhs: s,
            rhs: vec![],
        });
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(contract(format!("uniformity needs at least two embeddings, got {n}")));
    }
    if let Some(row) = (0..n).find(|&i| g.value(emb).row(i).iter().all(|&v| v == 0.0)) {
        return Err(contract(format!("embedding row {row} has zero norm")));
    }
    let sq = g.square(emb);
    let norms = g.reduce_sum(sq, 1)?;
    let norms = g.sqrt(norms);
    let norms = g.expand(norms, 1, d)?;
    let unit = g.div(emb, norms)?;
    let ut = g.transpose_last(unit)?;
    let gram = g.matmul(unit, ut)?;
    let gram = g.reshape(gram, &[n * n])?;
    let pairs = n * (n - 1) / 2;
    let (mut nm, mut nn, mut mm) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for a in 0..n {
        for b in a + 1..n {
            nm.push(a * n + b);
            nn.push(a * n + a);
            mm.push(b * n + b);
        }
    }
    let g_nm = g.index_select(gram, 0, &nm)?;
    let g_nn = g.index_select(gram, 0, &nn)?;
    let g_mm = g.index_select(gram, 0, &mm)?;
    let diag = g.add(g_nn, g_mm)?;
    let cross = g.mul_scalar(g_nm, 2.0);
    let dist = g.sub(diag, cross)?;
    let logits = g.mul_scalar(dist, -2.0);
    let max = g.value(logits).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.add_scalar(logits, -max);
    let e = g.exp(shifted);
    let total = g.sum_all(e);
    let lse = g.log(total);
    Ok(g.add_scalar(lse, max - (pairs as f64).ln()))
}

/// Loss terms of one U-MAE step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// `l_mae + λ·l_u` (the MAE node itself when the uniformity term is off)
    pub total: Var,
    pub l_mae: Var,
    /// Sum of the active uniformity terms, before weighting.
    pub l_u: Option<Var>,
}

/// `L_MAE + λ·L_U` where the uniformity term reads the batch's [CLS]
/// embeddings (`cls`), all kept-token embeddings pooled across the batch
/// (`token`), or both with the same weight (`both`).
pub fn u_mae_loss(ctx: &mut Ctx, encoder: &Encoder, decoder: &Decoder, patches: &Tensor, plan: &MaskPlan, cfg: &ObjectiveConfig) -> Result<LossParts> {
    let active = cfg.uniformity_active();
    if active && plan.batch() < 2 {
        return Err(contract("a uniformity target needs a batch of at least 2"));
    }
    let encoded = encoder.forward_patches(ctx, patches, Some(&plan.kept))?;
    let pred = decoder.forward(ctx, &encoded, plan)?;
    let l_mae = masked_mse(ctx.graph, pred, patches, plan)?;
    if !active {
        return Ok(LossParts {
            total: l_mae,
            l_mae,
            l_u: None,
        });
    }
    let mut terms = Vec::new();
    if matches!(cfg.target, UniformityTarget::Cls | UniformityTarget::Both) {
        terms.push(uniformity_loss(ctx.graph, encoded.cls)?);
    }
    if matches!(cfg.target, UniformityTarget::Token | UniformityTarget::Both) {
        let s = ctx.graph.shape(encoded.tokens).to_vec();
        let pooled = ctx.graph.reshape(encoded.tokens, &[s[0] * s[1], s[2]])?;
        terms.push(uniformity_loss(ctx.graph, pooled)?);
    }
    let mut l_u = terms[0];
    for &t in &terms[1..] {
        l_u = ctx.graph.add(l_u, t)?;
    }
    let weighted = ctx.graph.mul_scalar(l_u, cfg.lambda);
    let total = ctx.graph.add(l_mae, weighted)?;
    Ok(LossParts {
        total,
        l_mae,
        l_u: Some(l_u),
    })
}
