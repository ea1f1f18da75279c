//! Forward-pass context and the affine layer shared by encoder and decoder.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// BN normalizes with batch statistics and updates running buffers.
    Train,
    /// BN normalizes with running buffers; nothing is mutated.
    Eval,
}

/// Everything a forward pass needs: the graph being recorded, the parameter
/// store (mutable for BN running statistics) and the mode.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    /// Replaces every BN layer's own momentum for this pass.
    pub bn_momentum: Option<f64>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            bn_momentum: None,
        }
    }

    /// Binds a stored parameter into the graph.
    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in, out]` from a truncated normal, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, vec![in_dim, out_dim], INIT_STD));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies `x·W + b` over the last axis of `x`, for any leading shape.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = ctx.graph.reshape(x, &[rows, shape[shape.len() - 1]])?;
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.graph.matmul(flat, w)?;
        let y = ctx.graph.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        ctx.graph.reshape(y, &out_shape)
    }
}
