//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar output walks the records in reverse
//! topological order and accumulates gradients into every leaf created
//! with `requires_grad`. Accumulation order is fixed by the record
//! order, so repeated runs with identical inputs are bit-identical.
//!
//! The element type is generic: training uses `f32`, gradient
//! verification instantiates the same code with `f64`.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;

/// Element type of tensors. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Debug + Default + Sum + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Handle to a tensor inside one [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    /// a · bᵀ, used for the qkᵀ attention scores.
    MatMulNT {
        a: TensorId,
        b: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: S,
    },
    Act {
        x: TensorId,
        kind: Activation,
    },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Log(TensorId),
    Abs(TensorId),
    Scale(TensorId, S),
    Offset(TensorId),
    ClampMax(TensorId, S),
    SumAll(TensorId),
    MeanAll(TensorId),
    GatherRows {
        x: TensorId,
        cols: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    SliceRow {
        x: TensorId,
        row: usize,
    },
    Reshape(TensorId),
}

struct Node<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Recorded computation graph. One tape per forward/backward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad: false,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Gradients accumulate into it iff `requires_grad`.
    pub fn leaf(
        &mut self,
        shape: Vec<usize>,
        values: Vec<S>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape,
                right: vec![values.len()],
            });
        }
        let id = self.push(shape, values, Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Rows/cols view of a tensor whose last axis has length `last`.
    fn as_rows(&self, id: TensorId, last: usize, op: &'static str) -> Result<usize> {
        let n = numel(&self.nodes[id.0].shape);
        if last == 0 || n % last != 0 || self.nodes[id.0].shape.last() != Some(&last) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[id.0].shape.clone(),
                right: vec![last],
            });
        }
        Ok(n / last)
    }

    /// y = x·W + b over the last axis of x. W is [in, out], b is [out].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: self.nodes[x.0].shape.clone(),
                right: wshape,
            });
        }
        let (din, dout) = (wshape[0], wshape[1]);
        let rows = self.as_rows(x, din, "linear")?;
        if let Some(b) = b {
            if self.nodes[b.0].shape != [dout] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: wshape,
                    right: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let mut out = match b {
            Some(b) => {
                let bias = &self.nodes[b.0].values;
                let mut v = Vec::with_capacity(rows * dout);
                for _ in 0..rows {
                    v.extend_from_slice(bias);
                }
                v
            }
            None => vec![S::zero(); rows * dout],
        };
        matmul_acc(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &mut out,
            rows,
            din,
            dout,
        );
        let mut shape = self.nodes[x.0].shape.clone();
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(shape, out, Op::Linear { x, w, b }))
    }

    /// a [m,k] · b [k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_acc(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    /// a [m,k] · bᵀ with b [n,k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMulNT { a, b }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        if self.nodes[x.0].values.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericDomain {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let mut out = self.nodes[x.0].values.clone();
        for_each_lane(&shape, axis, |idx| {
            let max = idx
                .iter()
                .map(|&i| out[i])
                .fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &i in idx {
                out[i] = (out[i] - max).exp();
                sum = sum + out[i];
            }
            for &i in idx {
                out[i] = out[i] / sum;
            }
        });
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    /// Standardize the last axis, then apply the affine gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: S,
    ) -> Result<TensorId> {
        let d = *self.nodes[x.0].shape.last().ok_or(Error::Contract {
            op: "layer_norm",
            detail: "zero-rank input".into(),
        })?;
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[gamma.0].shape.clone(),
            });
        }
        let rows = self.as_rows(x, d, "layer_norm")?;
        let xv = &self.nodes[x.0].values;
        let g = &self.nodes[gamma.0].values;
        let b = &self.nodes[beta.0].values;
        let dn = S::from_f64(d as f64);
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / dn;
            let inv = (var + eps).sqrt().recip();
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> Result<TensorId> {
        if let Activation::LeakyRelu(slope) = kind {
            if !(0.0 < slope && slope < 1.0) {
                return Err(Error::Contract {
                    op: "activation",
                    detail: format!("leaky_relu slope {slope} not in (0,1)"),
                });
            }
        }
        let out = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(S::zero()),
                Activation::LeakyRelu(s) => {
                    if v > S::zero() {
                        v
                    } else {
                        v * S::from_f64(s)
                    }
                }
            })
            .collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::Act { x, kind }))
    }

    fn binary(
        &mut self,
        x: TensorId,
        y: TensorId,
        op: &'static str,
        f: impl Fn(S, S) -> S,
        mk: impl Fn(TensorId, TensorId) -> Op<S>,
    ) -> Result<TensorId> {
        if self.nodes[x.0].shape != self.nodes[y.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[y.0].shape.clone(),
            });
        }
        let out = self.nodes[x.0]
            .values
            .iter()
            .zip(&self.nodes[y.0].values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), out, mk(x, y)))
    }

    pub fn add(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.binary(x, y, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.binary(x, y, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.binary(x, y, "mul", |a, b| a * b, Op::Mul)
    }

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> TensorId {
        let out = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), out, op)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.nodes[x.0]
            .values
            .iter()
            .find(|v| **v <= S::zero() || v.is_nan())
        {
            return Err(Error::NumericDomain {
                op: "log",
                detail: format!("non-positive input {bad:?}"),
            });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> TensorId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: TensorId, c: S) -> TensorId {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// min(x, c) elementwise; gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: TensorId, c: S) -> TensorId {
        self.unary(x, |v| v.min(c), Op::ClampMax(x, c))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x.0].values.iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].values.len();
        let s = self.nodes[x.0].values.iter().copied().sum::<S>()
            / S::from_f64(n as f64);
        self.push(vec![1], vec![s], Op::MeanAll(x))
    }

    /// Pick one column per row of a [n, c] tensor; output is [n].
    pub fn gather_rows(&mut self, x: TensorId, cols: Vec<usize>) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || cols.len() != shape[0] || cols.iter().any(|&c| c >= shape[1]) {
            return Err(Error::Contract {
                op: "gather_rows",
                detail: format!("cols {:?} invalid for shape {shape:?}", cols),
            });
        }
        let c = shape[1];
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &col)| self.nodes[x.0].values[r * c + col])
            .collect();
        Ok(self.push(vec![shape[0]], out, Op::GatherRows { x, cols }))
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract {
                op: "concat",
                detail: "needs at least one part and axis in {0,1}".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if first.len() != 2 {
            return Err(Error::Contract {
                op: "concat",
                detail: format!("expected 2-D parts, got {first:?}"),
            });
        }
        let fixed = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(&self.nodes[p.0].values);
            }
        } else {
            for r in 0..first[0] {
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    out.extend_from_slice(&self.nodes[p.0].values[r * w..(r + 1) * w]);
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row `row` of a [n, d] tensor as a [d] vector.
    pub fn slice_row(&mut self, x: TensorId, row: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::Contract {
                op: "slice_row",
                detail: format!("row {row} invalid for shape {shape:?}"),
            });
        }
        let d = shape[1];
        let out = self.nodes[x.0].values[row * d..(row + 1) * d].to_vec();
        Ok(self.push(vec![d], out, Op::SliceRow { x, row }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[x.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[x.0].shape.clone(),
                right: shape,
            });
        }
        let v = self.nodes[x.0].values.clone();
        Ok(self.push(shape, v, Op::Reshape(x)))
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<S> {
        if self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].values.len();
            self.nodes[id.0].grad = Some(vec![S::zero(); n]);
        }
        self.nodes[id.0].grad.as_mut().unwrap()
    }

    /// Reverse pass from a scalar output. Leaf gradients are then
    /// available through [`Tape::grad`].
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if self.nodes[output.0].values.len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                detail: format!(
                    "output must be scalar, got shape {:?}",
                    self.nodes[output.0].shape
                ),
            });
        }
        self.grad_buf(output)[0] = S::one();
        for i in (0..=output.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let dy = self.nodes[i].grad.take().unwrap();
            self.backprop(i, &dy)?;
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[S]) {
        let g = self.grad_buf(id);
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi = *gi + c;
        }
    }

    fn backprop(&mut self, i: usize, dy: &[S]) -> Result<()> {
        // Ops whose backward needs node data are matched by value clones of
        // small metadata; bulk arrays are borrowed from `self.nodes`.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let din = self.nodes[w.0].shape[0];
                let dout = self.nodes[w.0].shape[1];
                let rows = self.nodes[x.0].values.len() / din;
                // dx = dy · wᵀ
                let mut dx = vec![S::zero(); rows * din];
                {
                    let wv = &self.nodes[w.0].values;
                    for r in 0..rows {
                        for o in 0..dout {
                            let g = dy[r * dout + o];
                            if g != S::zero() {
                                let wrow = &wv[o..];
                                for c in 0..din {
                                    dx[r * din + c] =
                                        dx[r * din + c] + g * wrow[c * dout];
                                }
                            }
                        }
                    }
                }
                // dw = xᵀ · dy
                let mut dw = vec![S::zero(); din * dout];
                {
                    let xv = &self.nodes[x.0].values;
                    for r in 0..rows {
                        for c in 0..din {
                            let xc = xv[r * din + c];
                            if xc != S::zero() {
                                let dwrow = &mut dw[c * dout..(c + 1) * dout];
                                let dyrow = &dy[r * dout..(r + 1) * dout];
                                for o in 0..dout {
                                    dwrow[o] = dwrow[o] + xc * dyrow[o];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                if let Some(b) = b {
                    let mut db = vec![S::zero(); dout];
                    for r in 0..rows {
                        for o in 0..dout {
                            db[o] = db[o] + dy[r * dout + o];
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // da = dy · bᵀ
                let mut da = vec![S::zero(); m * k];
                {
                    let bv = &self.nodes[b.0].values;
                    for r in 0..m {
                        for j in 0..n {
                            let g = dy[r * n + j];
                            for c in 0..k {
                                da[r * k + c] = da[r * k + c] + g * bv[c * n + j];
                            }
                        }
                    }
                }
                // db = aᵀ · dy
                let mut db = vec![S::zero(); k * n];
                {
                    let av = &self.nodes[a.0].values;
                    for r in 0..m {
                        for c in 0..k {
                            let x = av[r * k + c];
                            for j in 0..n {
                                db[c * n + j] = db[c * n + j] + x * dy[r * n + j];
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                // y = a bᵀ: da = dy · b, db = dyᵀ · a
                let mut da = vec![S::zero(); m * k];
                let mut db = vec![S::zero(); n * k];
                {
                    let bv = &self.nodes[b.0].values;
                    let av = &self.nodes[a.0].values;
                    for r in 0..m {
                        for j in 0..n {
                            let g = dy[r * n + j];
                            if g != S::zero() {
                                for c in 0..k {
                                    da[r * k + c] = da[r * k + c] + g * bv[j * k + c];
                                    db[j * k + c] = db[j * k + c] + g * av[r * k + c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[i].shape.clone();
                let s = &self.nodes[i].values;
                let mut dx = vec![S::zero(); s.len()];
                for_each_lane(&shape, axis, |idx| {
                    let dot: S = idx.iter().map(|&j| dy[j] * s[j]).sum();
                    for &j in idx {
                        dx[j] = s[j] * (dy[j] - dot);
                    }
                });
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = *self.nodes[x.0].shape.last().unwrap();
                let rows = self.nodes[x.0].values.len() / d;
                let dn = S::from_f64(d as f64);
                let mut dx = vec![S::zero(); rows * d];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                {
                    let xv = &self.nodes[x.0].values;
                    let g = &self.nodes[gamma.0].values;
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let dyr = &dy[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<S>() / dn;
                        let var = row
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<S>()
                            / dn;
                        let inv = (var + eps).sqrt().recip();
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = dyr[c] * g[c];
                            dgamma[c] = dgamma[c] + dyr[c] * xhat;
                            dbeta[c] = dbeta[c] + dyr[c];
                            mean_dxhat = mean_dxhat + dxhat;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = dyr[c] * g[c];
                            dx[r * d + c] =
                                inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Act { x, kind } => {
                let (x, kind) = (*x, *kind);
                let dx: Vec<S> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| match kind {
                        Activation::Relu => {
                            if v > S::zero() {
                                g
                            } else {
                                S::zero()
                            }
                        }
                        Activation::LeakyRelu(s) => {
                            if v > S::zero() {
                                g
                            } else {
                                g * S::from_f64(s)
                            }
                        }
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Add(x, y) => {
                let (x, y) = (*x, *y);
                self.accumulate(x, dy);
                self.accumulate(y, dy);
            }
            Op::Sub(x, y) => {
                let (x, y) = (*x, *y);
                self.accumulate(x, dy);
                let neg: Vec<S> = dy.iter().map(|&g| -g).collect();
                self.accumulate(y, &neg);
            }
            Op::Mul(x, y) => {
                let (x, y) = (*x, *y);
                let dx: Vec<S> = self.nodes[y.0]
                    .values
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| v * g)
                    .collect();
                let dyv: Vec<S> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| v * g)
                    .collect();
                self.accumulate(x, &dx);
                self.accumulate(y, &dyv);
            }
            Op::Neg(x) => {
                let x = *x;
                let dx: Vec<S> = dy.iter().map(|&g| -g).collect();
                self.accumulate(x, &dx);
            }
            Op::Log(x) => {
                let x = *x;
                let dx: Vec<S> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| g / v)
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Abs(x) => {
                // subgradient 0 at the origin
                let x = *x;
                let dx: Vec<S> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        if v > S::zero() {
                            g
                        } else if v < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                let dx: Vec<S> = dy.iter().map(|&g| g * c).collect();
                self.accumulate(x, &dx);
            }
            Op::Offset(x) => {
                let x = *x;
                self.accumulate(x, dy);
            }
            Op::ClampMax(x, c) => {
                let (x, c) = (*x, *c);
                let dx: Vec<S> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v < c { g } else { S::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::SumAll(x) => {
                let x = *x;
                let dx = vec![dy[0]; self.nodes[x.0].values.len()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].values.len();
                let g = dy[0] / S::from_f64(n as f64);
                let dx = vec![g; n];
                self.accumulate(x, &dx);
            }
            Op::GatherRows { x, cols } => {
                let x = *x;
                let cols = cols.clone();
                let c = self.nodes[x.0].shape[1];
                let mut dx = vec![S::zero(); self.nodes[x.0].values.len()];
                for (r, &col) in cols.iter().enumerate() {
                    dx[r * c + col] = dy[r];
                }
                self.accumulate(x, &dx);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                if axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].values.len();
                        let slice = dy[off..off + n].to_vec();
                        self.accumulate(p, &slice);
                        off += n;
                    }
                } else {
                    let rows = self.nodes[i].shape[0];
                    let total_w = self.nodes[i].shape[1];
                    let mut col_off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[1];
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(
                                &dy[r * total_w + col_off..r * total_w + col_off + w],
                            );
                        }
                        self.accumulate(p, &dp);
                        col_off += w;
                    }
                }
            }
            Op::SliceRow { x, row } => {
                let (x, row) = (*x, *row);
                let d = self.nodes[x.0].shape[1];
                let mut dx = vec![S::zero(); self.nodes[x.0].values.len()];
                dx[row * d..(row + 1) * d].copy_from_slice(dy);
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate(x, dy);
            }
        }
        Ok(())
    }
}

/// out[m,n] += a[m,k] · b[k,n], cache-friendly ikj order.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != S::zero() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
}

/// Visit every 1-D lane of `shape` along `axis`; `f` receives flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; axis_len];
    for o in 0..outer {
        for inn in 0..inner {
            for (a, slot) in idx.iter_mut().enumerate() {
                *slot = o * axis_len * inner + a * inner + inn;
            }
            f(&idx);
        }
    }
}

/// Max relative error between `analytic` and central finite differences of
/// `f` at `theta` with step `h`.
pub fn grad_check<F>(f: F, theta: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "grad_check requires h > 0");
    assert_eq!(theta.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![3.0, 4.0], false).unwrap();
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b0 = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = t.linear(x, eye, Some(b0)).unwrap();
        assert_eq!(t.values(y), &[3.0, 4.0]);

        let zeros = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = t.constant(vec![2], vec![5.0, 6.0]).unwrap();
        let y = t.linear(x, zeros, Some(b)).unwrap();
        assert_eq!(t.values(y), &[5.0, 6.0]);
    }

    #[test]
    fn linear_hand_computed_dot() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![3.0, 4.0], false).unwrap();
        let w = t.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = t.constant(vec![1], vec![1.0]).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.values(y), &[12.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let x = t.leaf(vec![3], vec![1.0, 2.0, 3.0], false).unwrap();
        let w = t.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let err = t.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_ratio() {
        let mut t = tape();
        let x = t.leaf(vec![4], vec![0.0; 4], false).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for &v in t.values(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x = t.leaf(vec![2], vec![2.0f64.ln(), 0.0], false).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!((t.values(y)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.values(y)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut t = tape();
        let x = t.leaf(vec![3], vec![0.3, -1.2, 2.0], false).unwrap();
        let a = t.softmax(x, 0).unwrap();
        let shifted = t.offset(x, 17.5);
        let b = t.softmax(shifted, 0).unwrap();
        for (u, v) in t.values(a).iter().zip(t.values(b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![f64::NAN, 0.0], false).unwrap();
        assert!(matches!(
            t.softmax(x, 0),
            Err(Error::NumericDomain { .. })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = tape();
        let g1 = t.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let b0 = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        // constant row -> zeros
        let x = t.leaf(vec![2], vec![5.0, 5.0], false).unwrap();
        let y = t.layer_norm(x, g1, b0, 1e-5).unwrap();
        for &v in t.values(y) {
            assert!(v.abs() < 1e-2);
        }
        // already standardized, eps = 0
        let x = t.leaf(vec![2], vec![1.0, -1.0], false).unwrap();
        let y = t.layer_norm(x, g1, b0, 0.0).unwrap();
        assert!((t.values(y)[0] - 1.0).abs() < 1e-12);
        assert!((t.values(y)[1] + 1.0).abs() < 1e-12);
        // affine of the previous case
        let g2 = t.constant(vec![2], vec![2.0, 2.0]).unwrap();
        let b1 = t.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let y = t.layer_norm(x, g2, b1, 0.0).unwrap();
        assert!((t.values(y)[0] - 3.0).abs() < 1e-12);
        assert!((t.values(y)[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn activations() {
        let mut t = tape();
        let x = t.leaf(vec![3], vec![-1.0, 2.0, 0.0], false).unwrap();
        let y = t.activation(x, Activation::Relu).unwrap();
        assert_eq!(t.values(y), &[0.0, 2.0, 0.0]);
        let y = t.activation(x, Activation::LeakyRelu(0.01)).unwrap();
        assert_eq!(t.values(y), &[-0.01, 2.0, 0.0]);
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut t = tape();
        let a = t.leaf(vec![2], vec![3.0, 1.0], false).unwrap();
        let b = t.leaf(vec![2], vec![1.0, 1.0], false).unwrap();
        let d = t.sub(a, b).unwrap();
        assert_eq!(t.values(d), &[2.0, 0.0]);
        let x = t.leaf(vec![4], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let m = t.mean_all(x);
        assert_eq!(t.values(m), &[2.5]);
        let one = t.leaf(vec![1], vec![1.0], false).unwrap();
        let l = t.log(one).unwrap();
        assert_eq!(t.values(l), &[0.0]);
        let bad = t.leaf(vec![1], vec![-1.0], false).unwrap();
        assert!(matches!(t.log(bad), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![1.0, -2.0], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let y = t.sum_all(sq);
        t.backward(y).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn backward_bias_grad_is_ones() {
        let mut t = tape();
        let x = t.leaf(vec![2, 2], vec![0.5, -0.5, 1.5, 2.5], false).unwrap();
        let w = t.constant(vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        let b = t.leaf(vec![3], vec![0.0; 3], true).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        for &g in t.grad(b).unwrap() {
            assert!((g - 2.0).abs() < 1e-12); // two rows each contribute 1
        }
    }

    #[test]
    fn backward_unused_leaf_gets_zero() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let unused = t.leaf(vec![2], vec![3.0, 4.0], true).unwrap();
        let y = t.sum_all(x);
        t.backward(y).unwrap();
        // unused leaf never got a grad buffer; treat missing as zero
        assert!(t.grad(unused).is_none() || t.grad(unused).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let f = |p: &[f64]| p[0] * p[0];
        let err = grad_check(f, &[3.0], &[6.0], 1e-4);
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let f = |_: &[f64]| 7.0;
        assert_eq!(grad_check(f, &[1.0, 2.0], &[0.0, 0.0], 1e-4), 0.0);
    }

    #[test]
    fn attention_style_matmul_grads_match_fd() {
        // composite: softmax(q kᵀ) v summed, grads vs finite differences
        let dims = (3usize, 2usize);
        let build = |theta: &[f64]| -> (Tape<f64>, TensorId, [TensorId; 3]) {
            let (n, d) = dims;
            let mut t: Tape<f64> = Tape::new();
            let q = t.leaf(vec![n, d], theta[..n * d].to_vec(), true).unwrap();
            let k = t
                .leaf(vec![n, d], theta[n * d..2 * n * d].to_vec(), true)
                .unwrap();
            let v = t
                .leaf(vec![n, d], theta[2 * n * d..].to_vec(), true)
                .unwrap();
            let scores = t.matmul_nt(q, k).unwrap();
            let attn = t.softmax(scores, 1).unwrap();
            let out = t.matmul(attn, v).unwrap();
            let sq = t.mul(out, out).unwrap();
            let loss = t.sum_all(sq);
            (t, loss, [q, k, v])
        };
        let theta: Vec<f64> = (0..18).map(|i| ((i * 7 + 3) % 11) as f64 * 0.1 - 0.5).collect();
        let (mut t, loss, leaves) = build(&theta);
        t.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for leaf in leaves {
            analytic.extend_from_slice(t.grad(leaf).unwrap());
        }
        let f = |p: &[f64]| {
            let (t, loss, _) = build(p);
            t.values(loss)[0]
        };
        let err = grad_check(f, &theta, &analytic, 1e-6);
        assert!(err < 1e-7, "err = {err}");
    }
}
