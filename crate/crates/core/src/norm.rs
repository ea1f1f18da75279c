//! Layer normalization, batch normalization and their per-position
//! composition for sequences whose first position is the [CLS] symbol.
//!
//! A [`NormScheme`] is the configuration (which kind of normalizer serves the
//! [CLS] position and which serves the tokens); a [`NormSite`] is one
//! instantiated normalization point inside a model, owning its parameters.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Ln,
    Bn,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Ln => "ln",
            NormKind::Bn => "bn",
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ln" => Ok(NormKind::Ln),
            "bn" => Ok(NormKind::Bn),
            other => Err(config(format!("unknown norm kind {other:?} (expected ln or bn)"))),
        }
    }
}

/// Which normalizer serves which positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormScheme {
    /// One layer for every position.
    Share(NormKind),
    /// `cls` for position 0, `token` for positions 1.. with disjoint
    /// parameters.
    Sep { cls: NormKind, token: NormKind },
}

impl NormScheme {
    /// The four schemes of the ablation grid: LN, BN, BN+LN, BN+BN.
    pub const ABLATION: [NormScheme; 4] = [
        NormScheme::Share(NormKind::Ln),
        NormScheme::Share(NormKind::Bn),
        NormScheme::Sep {
            cls: NormKind::Bn,
            token: NormKind::Ln,
        },
        NormScheme::Sep {
            cls: NormKind::Bn,
            token: NormKind::Bn,
        },
    ];

    /// Every scheme over {LN, BN}.
    pub const ALL: [NormScheme; 6] = [
        NormScheme::Share(NormKind::Ln),
        NormScheme::Share(NormKind::Bn),
        NormScheme::Sep {
            cls: NormKind::Bn,
            token: NormKind::Ln,
        },
        NormScheme::Sep {
            cls: NormKind::Bn,
            token: NormKind::Bn,
        },
        NormScheme::Sep {
            cls: NormKind::Ln,
            token: NormKind::Bn,
        },
        NormScheme::Sep {
            cls: NormKind::Ln,
            token: NormKind::Ln,
        },
    ];

    pub fn is_sep(self) -> bool {
        matches!(self, NormScheme::Sep { .. })
    }

    pub fn cls_kind(self) -> NormKind {
        match self {
            NormScheme::Share(k) => k,
            NormScheme::Sep { cls, .. } => cls,
        }
    }

    pub fn token_kind(self) -> NormKind {
        match self {
            NormScheme::Share(k) => k,
            NormScheme::Sep { token, .. } => token,
        }
    }
}

/// `share:ln`, `share:bn`, `sep:bn+ln`, ...
impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormScheme::Share(k) => write!(f, "share:{}", k.as_str()),
            NormScheme::Sep { cls, token } => write!(f, "sep:{}+{}", cls.as_str(), token.as_str()),
        }
    }
}

impl FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (variant, kinds) = s
            .split_once(':')
            .ok_or_else(|| config(format!("norm scheme {s:?} should look like share:ln or sep:bn+ln")))?;
        match variant {
            "share" => Ok(NormScheme::Share(kinds.parse()?)),
            "sep" => {
                let (c, t) = kinds
                    .split_once('+')
                    .ok_or_else(|| config(format!("sep scheme {s:?} needs two kinds, e.g. sep:bn+ln")))?;
                Ok(NormScheme::Sep {
                    cls: c.parse()?,
                    token: t.parse()?,
                })
            }
            other => Err(config(format!("unknown norm variant {other:?}"))),
        }
    }
}

// ----- graph-level functions --------------------------------------------

/// Zero-mean, unit-variance along `axis` (population variance), without the
/// affine part: `(h − μ) / sqrt(σ² + eps)`.
pub fn standardize(g: &mut Graph, h: Var, axis: usize, eps: f64) -> Result<Var> {
    let n = g.shape(h)[axis];
    let mean = g.reduce_mean(h, axis)?;
    let mean = g.expand(mean, axis, n)?;
    let centered = g.sub(h, mean)?;
    let var = g.reduce_var(h, axis)?;
    let var = g.add_scalar(var, eps);
    let std = g.sqrt(var);
    let std = g.expand(std, axis, n)?;
    g.div(centered, std)
}

/// `γ ⊙ x + β` over the last axis.
pub fn affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = g.mul(x, gamma)?;
    g.add(y, beta)
}

/// Layer normalization over the last axis of `h`.
pub fn layer_norm(g: &mut Graph, h: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let last = g.shape(h).len() - 1;
    let d = g.shape(h)[last];
    if g.shape(gamma) != [d] || g.shape(beta) != [d] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(gamma).to_vec(),
        });
    }
    let hn = standardize(g, h, last, eps)?;
    affine(g, hn, gamma, beta)
}

/// Batch statistics observed by one train-mode BN call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Train-mode batch normalization of `h: [B×d]` with the batch's own mean
/// and biased variance. Gradients flow through the statistics.
pub fn batch_norm_train(g: &mut Graph, h: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "batch_norm",
            lhs: shape,
            rhs: vec![],
        });
    }
    if shape[0] < 2 {
        return Err(contract(format!("batch norm in train mode needs a batch of at least 2, got {}", shape[0])));
    }
    let mean = g.reduce_mean(h, 0)?;
    let var = g.reduce_var(h, 0)?;
    let stats = BatchStats {
        mean: g.value(mean).clone().reshape(vec![shape[1]])?,
        var: g.value(var).clone().reshape(vec![shape[1]])?,
    };
    let hn = standardize(g, h, 0, eps)?;
    Ok((affine(g, hn, gamma, beta)?, stats))
}

/// Eval-mode batch normalization with fixed running statistics.
pub fn batch_norm_eval(g: &mut Graph, h: Var, gamma: Var, beta: Var, running_mean: &Tensor, running_var: &Tensor, eps: f64) -> Result<Var> {
    let m = g.constant(running_mean.clone());
    let inv = g.constant(running_var.map(|v| 1.0 / (v + eps).sqrt()));
    let c = g.sub(h, m)?;
    let hn = g.mul(c, inv)?;
    affine(g, hn, gamma, beta)
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn ema_update(running: &mut Tensor, batch: &Tensor, momentum: f64) {
    for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Closed-form LN parameter gradients from the pre-affine sequence `H̃`
/// `[L×d]` and the upstream gradient on the affine output:
/// `dγ_i = Σ_l up[l,i]·H̃[l,i]`, `dβ_i = Σ_l up[l,i]`.
pub fn norm_param_grads_closed_form(h_tilde: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    if h_tilde.shape() != upstream.shape() || h_tilde.rank() != 2 {
        return Err(Error::Shape {
            op: "norm_param_grads_closed_form",
            lhs: h_tilde.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    let d = h_tilde.cols();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for l in 0..h_tilde.rows() {
        for i in 0..d {
            let u = upstream.row(l)[i];
            dgamma[i] += u * h_tilde.row(l)[i];
            dbeta[i] += u;
        }
    }
    Ok((Tensor::new(vec![d], dgamma)?, Tensor::new(vec![d], dbeta)?))
}

// ----- layers with parameters -----------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub enum NormLayer {
    Ln(LayerNormParams),
    Bn(BatchNormParams),
}

impl NormLayer {
    /// γ = 1, β = 0; BN running mean 0 and variance 1.
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        match kind {
            NormKind::Ln => NormLayer::Ln(LayerNormParams {
                gamma,
                beta,
                eps: DEFAULT_EPS,
            }),
            NormKind::Bn => NormLayer::Bn(BatchNormParams {
                gamma,
                beta,
                running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![dim])),
                running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![dim])),
                momentum: DEFAULT_MOMENTUM,
                eps: DEFAULT_EPS,
            }),
        }
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormLayer::Ln(_) => NormKind::Ln,
            NormLayer::Bn(_) => NormKind::Bn,
        }
    }

    pub fn gamma(&self) -> ParamId {
        match self {
            NormLayer::Ln(p) => p.gamma,
            NormLayer::Bn(p) => p.gamma,
        }
    }

    pub fn beta(&self) -> ParamId {
        match self {
            NormLayer::Ln(p) => p.beta,
            NormLayer::Bn(p) => p.beta,
        }
    }

    /// Normalizes `h: [N×d]`. LN works row by row; BN treats the N rows as
    /// its batch and, in train mode, updates the running statistics.
    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        match self {
            NormLayer::Ln(p) => {
                let gamma = ctx.p(p.gamma);
                let beta = ctx.p(p.beta);
                layer_norm(ctx.graph, h, gamma, beta, p.eps)
            }
            NormLayer::Bn(p) => {
                let gamma = ctx.p(p.gamma);
                let beta = ctx.p(p.beta);
                match ctx.mode {
                    Mode::Train => {
                        let (y, stats) = batch_norm_train(ctx.graph, h, gamma, beta, p.eps)?;
                        let m = ctx.bn_momentum.unwrap_or(p.momentum);
                        ema_update(ctx.store.value_mut(p.running_mean), &stats.mean, m);
                        ema_update(ctx.store.value_mut(p.running_var), &stats.var, m);
                        Ok(y)
                    }
                    Mode::Eval => {
                        let rm = ctx.store.value(p.running_mean).clone();
                        let rv = ctx.store.value(p.running_var).clone();
                        batch_norm_eval(ctx.graph, h, gamma, beta, &rm, &rv, p.eps)
                    }
                }
            }
        }
    }
}

/// One normalization point of a model, instantiated from a [`NormScheme`].
#[derive(Clone, Debug)]
pub enum NormSite {
    Share(NormLayer),
    Sep { cls: NormLayer, token: NormLayer },
}

impl NormSite {
    /// Shared sites name parameters `{name}.*`; separate sites use
    /// `{name}.cls.*` and `{name}.token.*`.
    pub fn new(store: &mut ParamStore, name: &str, scheme: NormScheme, dim: usize) -> Self {
        match scheme {
            NormScheme::Share(k) => NormSite::Share(NormLayer::new(store, name, k, dim)),
            NormScheme::Sep { cls, token } => NormSite::Sep {
                cls: NormLayer::new(store, &format!("{name}.cls"), cls, dim),
                token: NormLayer::new(store, &format!("{name}.token"), token, dim),
            },
        }
    }

    /// Layer that serves position 0.
    pub fn cls_layer(&self) -> &NormLayer {
        match self {
            NormSite::Share(l) => l,
            NormSite::Sep { cls, .. } => cls,
        }
    }

    /// Layer that serves positions 1...
    pub fn token_layer(&self) -> &NormLayer {
        match self {
            NormSite::Share(l) => l,
            NormSite::Sep { token, .. } => token,
        }
    }

    /// Normalizes `h: [B×S×d]` whose position 0 is [CLS].
    ///
    /// Shared: one layer over all `B·S` position vectors (BN pools them into
    /// one batch). Separate: the cls layer sees the `B` [CLS] vectors, the
    /// token layer sees the `B·(S−1)` token vectors, and the results are put
    /// back in place.
    pub fn apply(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let shape = ctx.graph.shape(h).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "apply_norm",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        if s < 2 {
            return Err(contract(format!("apply_norm needs [CLS] plus at least one token, got sequence length {s}")));
        }
        match self {
            NormSite::Share(layer) => {
                let flat = ctx.graph.reshape(h, &[b * s, d])?;
                let y = layer.forward(ctx, flat)?;
                ctx.graph.reshape(y, &shape)
            }
            NormSite::Sep { cls, token } => {
                let c = ctx.graph.index_select(h, 1, &[0])?;
                let c = ctx.graph.reshape(c, &[b, d])?;
                let positions: Vec<usize> = (1..s).collect();
                let t = ctx.graph.index_select(h, 1, &positions)?;
                let t = ctx.graph.reshape(t, &[b * (s - 1), d])?;
                let c = cls.forward(ctx, c)?;
                let t = token.forward(ctx, t)?;
                let c = ctx.graph.reshape(c, &[b, 1, d])?;
                let t = ctx.graph.reshape(t, &[b, s - 1, d])?;
                ctx.graph.concat(&[c, t], 1)
            }
        }
    }

    /// Every parameter and buffer owned by this site.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let layer_ids = |l: &NormLayer| match l {
            NormLayer::Ln(p) => vec![p.gamma, p.beta],
            NormLayer::Bn(p) => vec![p.gamma, p.beta, p.running_mean, p.running_var],
        };
        match self {
            NormSite::Share(l) => layer_ids(l),
            NormSite::Sep { cls, token } => {
                let mut v = layer_ids(cls);
                v.extend(layer_ids(token));
                v
            }
        }
    }
}
