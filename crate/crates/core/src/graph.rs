//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of recorded operations. Every node keeps
//! its forward value; [`Graph::backward`] walks the tape in reverse and
//! accumulates adjoints. Graphs are meant to be rebuilt for every training
//! step.
//!
//! # Broadcasting
//!
//! Binary element-wise ops (`add`, `sub`, `mul`, `div`) accept exactly three
//! operand layouts, and only the right-hand operand is ever broadcast:
//!
//! * identical shapes;
//! * the right operand's shape is a proper suffix of the left's (for example
//!   `[B, S, d]` with `[d]`, or `[N, d]` with `[d]`), so it repeats over the
//!   leading axes;
//! * the right operand holds a single element (scalar).
//!
//! Anything else is a shape error. Use [`Graph::expand`] to broadcast a
//! size-1 axis explicitly.
//!
//! # Numeric checks
//!
//! Division by zero, `log` of a non-positive value and `sqrt` of a negative
//! value yield quiet NaN. With [`Graph::set_checks`] enabled each occurrence
//! (and each softmax row that receives NaN) bumps [`Graph::warning_count`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// `sqrt(2/π)`, the constant of the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Trailing,
    Scalar,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Sqrt,
    Exp,
    Log,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: Var,
        rhs: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        input: Var,
    },
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    Variance { input: Var, axis: usize },
    SumAll(Var),
    Expand { input: Var, axis: usize },
    Softmax { input: Var, axis: usize },
    IndexSelect {
        input: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: HashMap<usize, Tensor>,
    bound: Vec<(ParamId, Var)>,
    bound_index: HashMap<ParamId, Var>,
    checks: bool,
    warnings: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables counting of NaN-producing inputs.
    pub fn set_checks(&mut self, on: bool) {
        self.checks = on;
    }

    pub fn warning_count(&self) -> usize {
        self.warnings
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn warn(&mut self, n: usize) {
        if self.checks {
            self.warnings += n;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter, created once per graph. Trainable
    /// parameters require gradients; buffers do not.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound_index.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.bound.push((id, v));
        self.bound_index.insert(id, v);
        v
    }

    /// Parameters bound into this graph, in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    // ----- element-wise -------------------------------------------------

    fn broadcast_rule(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<Broadcast> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        if ls == rs {
            Ok(Broadcast::Same)
        } else if self.value(rhs).numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if rs.len() < ls.len() && ls.ends_with(rs) {
            Ok(Broadcast::Trailing)
        } else {
            Err(Error::Shape {
                op,
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            })
        }
    }

    fn binary(&mut self, kind: BinaryKind, name: &'static str, lhs: Var, rhs: Var) -> Result<Var> {
        let bcast = self.broadcast_rule(name, lhs, rhs)?;
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let bn = b.len();
        let mut zero_divs = 0;
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bcast {
                    Broadcast::Same => b[i],
                    Broadcast::Scalar => b[0],
                    Broadcast::Trailing => b[i % bn],
                };
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => {
                        if y == 0.0 {
                            zero_divs += 1;
                            f64::NAN
                        } else {
                            x / y
                        }
                    }
                }
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.warn(zero_divs);
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                lhs,
                rhs,
                bcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    fn unary(&mut self, kind: UnaryKind, input: Var) -> Var {
        let x = self.value(input);
        let mut bad = 0;
        let value = x.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => {
                if v > 0.0 {
                    v.ln()
                } else {
                    f64::NAN
                }
            }
            UnaryKind::Gelu => gelu(v),
        });
        match kind {
            UnaryKind::Sqrt => bad = x.data().iter().filter(|&&v| v < 0.0).count(),
            UnaryKind::Log => bad = x.data().iter().filter(|&&v| v <= 0.0).count(),
            _ => {}
        }
        self.warn(bad);
        let rg = self.rg(input);
        self.push(value, Op::Unary { kind, input }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::MulScalar(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    // ----- linear algebra ---------------------------------------------

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `[B×m×k]·[B×k×n] → [B×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for t in 0..bs {
            gemm_nn(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose_last",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let value = transpose_last(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(value, Op::TransposeLast(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let value = permute(self.value(x), perm);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ----- reductions (axis kept with extent 1) ------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(axis_split(shape, axis))
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s[axis] = 1;
        s
    }

    fn reduce_with(&mut self, x: Var, axis: usize, name: &'static str, f: impl Fn(&[f64], usize, usize) -> f64) -> Result<Tensor> {
        let (outer, n, inner) = self.check_axis(name, x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut lane = vec![0.0; n];
        for o in 0..outer {
            for k in 0..inner {
                for (i, l) in lane.iter_mut().enumerate() {
                    *l = d[o * n * inner + i * inner + k];
                }
                out[o * inner + k] = f(&lane, n, k);
            }
        }
        Tensor::new(self.reduced_shape(x, axis), out)
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_with(x, axis, "reduce_sum", |l, _, _| l.iter().sum())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum { input: x, axis }, rg))
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_with(x, axis, "reduce_mean", |l, n, _| mean(l, n))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean { input: x, axis }, rg))
    }

    /// Population (divide-by-count) variance along `axis`.
    pub fn reduce_var(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_with(x, axis, "reduce_var", |l, n, _| {
            let m = mean(l, n);
            l.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
        })?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Variance { input: x, axis }, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Repeats an extent-1 axis `n` times.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let (outer, e, inner) = self.check_axis("expand", x, axis)?;
        if e != 1 || n == 0 {
            return Err(Error::Shape {
                op: "expand",
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis, n],
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &d[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = n;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Expand { input: x, axis }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        let mut nan_rows = 0;
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + k;
                let mut m = f64::NEG_INFINITY;
                let mut has_nan = false;
                for i in 0..n {
                    let v = d[idx(i)];
                    has_nan |= v.is_nan();
                    if v > m {
                        m = v;
                    }
                }
                if has_nan {
                    nan_rows += 1;
                    for i in 0..n {
                        out[idx(i)] = f64::NAN;
                    }
                    continue;
                }
                let mut s = 0.0;
                for i in 0..n {
                    let e = (d[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    out[idx(i)] /= s;
                }
            }
        }
        self.warn(nan_rows);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { input: x, axis }, rg))
    }

    /// Gathers `indices` along `axis`. Indices may repeat; the adjoint sums.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("index_select", x, axis)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::Shape {
                op: "index_select",
                lhs: self.shape(x).to_vec(),
                rhs: indices.to_vec(),
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = o * n * inner + i * inner;
                out.extend_from_slice(&d[start..start + inner]);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = indices.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::IndexSelect {
                input: x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let e = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every gradient-requiring leaf reached
    /// from `loss`. Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match self.grads.get_mut(&i) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            self.grads.insert(i, g);
                        }
                    }
                }
                op => self.propagate(op, i, g, &mut adj),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, i: usize, g: Tensor, adj: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match *op {
            Op::Leaf => unreachable!(),
            Op::Binary { kind, lhs, rhs, bcast } => {
                let a = self.value(lhs).data();
                let b = self.value(rhs).data();
                let bn = b.len();
                let bi = |k: usize| match bcast {
                    Broadcast::Same => k,
                    Broadcast::Scalar => 0,
                    Broadcast::Trailing => k % bn,
                };
                let gd = g.data();
                if self.rg(lhs) {
                    let da: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(k, &gk)| gk * b[bi(k)]).collect(),
                        BinaryKind::Div => gd.iter().enumerate().map(|(k, &gk)| gk / b[bi(k)]).collect(),
                    };
                    accumulate(adj, lhs, Tensor::new(self.shape(lhs).to_vec(), da).unwrap());
                }
                if self.rg(rhs) {
                    let mut db = vec![0.0; bn];
                    for (k, &gk) in gd.iter().enumerate() {
                        let j = bi(k);
                        db[j] += match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * a[k],
                            BinaryKind::Div => -gk * a[k] / (b[j] * b[j]),
                        };
                    }
                    accumulate(adj, rhs, Tensor::new(self.shape(rhs).to_vec(), db).unwrap());
                }
            }
            Op::Unary { kind, input } => {
                let x = self.value(input).data();
                let y = out.data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| match kind {
                        UnaryKind::Neg => -gk,
                        UnaryKind::Sqrt => gk * 0.5 / y[k],
                        UnaryKind::Exp => gk * y[k],
                        UnaryKind::Log => gk / x[k],
                        UnaryKind::Gelu => gk * gelu_grad(x[k]),
                    })
                    .collect();
                accumulate(adj, input, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::AddScalar(x) => accumulate(adj, x, g),
            Op::MulScalar(x, c) => accumulate(adj, x, g.map(|v| v * c)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), self.value(b).data(), &mut da, m, n, k);
                    accumulate(adj, a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(a).data(), g.data(), &mut db, m, k, n);
                    accumulate(adj, b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(b)[2];
                let gd = g.data();
                if self.rg(a) {
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        gemm_nt(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(adj, a, Tensor::new(vec![bs, m, k], da).unwrap());
                }
                if self.rg(b) {
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; bs * k * n];
                    for t in 0..bs {
                        gemm_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(adj, b, Tensor::new(vec![bs, k, n], db).unwrap());
                }
            }
            Op::TransposeLast(x) => accumulate(adj, x, transpose_last(&g)),
            Op::Permute(x, ref perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                accumulate(adj, x, permute(&g, &inverse));
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                accumulate(adj, x, g.reshape(shape).unwrap());
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(input), axis);
                let scale = if matches!(op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                let gd = g.data();
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for k in 0..inner {
                            d[o * n * inner + i * inner + k] = gd[o * inner + k] * scale;
                        }
                    }
                }
                accumulate(adj, input, Tensor::new(self.shape(input).to_vec(), d).unwrap());
            }
            Op::Variance { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(input), axis);
                let x = self.value(input).data();
                let gd = g.data();
                let mut d = vec![0.0; x.len()];
                let mut lane = vec![0.0; n];
                for o in 0..outer {
                    for k in 0..inner {
                        for (i, l) in lane.iter_mut().enumerate() {
                            *l = x[o * n * inner + i * inner + k];
                        }
                        let m = mean(&lane, n);
                        let gk = gd[o * inner + k];
                        for (i, l) in lane.iter().enumerate() {
                            d[o * n * inner + i * inner + k] = gk * 2.0 * (l - m) / n as f64;
                        }
                    }
                }
                accumulate(adj, input, Tensor::new(self.shape(input).to_vec(), d).unwrap());
            }
            Op::SumAll(x) => {
                let gv = g.item();
                accumulate(adj, x, Tensor::full(self.shape(x).to_vec(), gv));
            }
            Op::Expand { input, axis } => {
                let (outer, n, inner) = axis_split(g.shape(), axis);
                let gd = g.data();
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for k in 0..inner {
                            d[o * inner + k] += gd[o * n * inner + i * inner + k];
                        }
                    }
                }
                accumulate(adj, input, Tensor::new(self.shape(input).to_vec(), d).unwrap());
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(g.shape(), axis);
                let y = out.data();
                let gd = g.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + k;
                        let dot: f64 = (0..n).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            d[idx(i)] = y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                accumulate(adj, input, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::IndexSelect {
                input,
                axis,
                ref indices,
            } => {
                let (outer, n, inner) = axis_split(self.shape(input), axis);
                let gd = g.data();
                let m = indices.len();
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &gd[o * m * inner + j * inner..o * m * inner + (j + 1) * inner];
                        let dst = &mut d[o * n * inner + i * inner..o * n * inner + (i + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                accumulate(adj, input, Tensor::new(self.shape(input).to_vec(), d).unwrap());
            }
            Op::Concat { ref inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), axis);
                let gd = g.data();
                let mut offset = 0;
                for &x in inputs {
                    let e = self.shape(x)[axis];
                    if self.rg(x) {
                        let mut d = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let start = o * total * inner + offset * inner;
                            d.extend_from_slice(&gd[start..start + e * inner]);
                        }
                        accumulate(adj, x, Tensor::new(self.shape(x).to_vec(), d).unwrap());
                    }
                    offset += e;
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Mean with one correction pass, so a constant lane returns its value
/// exactly.
fn mean(lane: &[f64], n: usize) -> f64 {
    let m = lane.iter().sum::<f64>() / n as f64;
    m + lane.iter().map(|v| v - m).sum::<f64>() / n as f64
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn transpose_last(x: &Tensor) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = x.numel() / (rows * cols);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = d[base + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).unwrap()
}

fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    let mut idx = vec![0usize; r];
    let mut offset = 0usize;
    for _ in 0..d.len() {
        out.push(d[offset]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}
