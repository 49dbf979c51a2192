//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! the handles of its parents, so parents always precede children. `backward`
//! walks the tape once in reverse. Nodes that do not depend on any parameter
//! leaf are never differentiated, which is how frozen weights stay out of the
//! backward pass.
//!
//! Broadcasting is deliberately narrow: `add_bias`/`mul_bias` broadcast a
//! trailing-shape operand over leading batch dimensions, and `scale` multiplies
//! by a scalar. Everything else requires equal shapes.

use crate::error::{Error, Result};
use crate::scan::{self, ScanBackend};
use crate::tensor::{self, Conv1dGeometry, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Softplus,
    Sigmoid,
    Tanh,
    Neg,
    Silu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Neg => -x,
            Unary::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Neg => -1.0,
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    BmmBt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Reshape(Var),
    Tile(Var, usize),
    ConcatLast(Vec<Var>),
    SliceLast { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Conv1d { x: Var, w: Var, geo: Conv1dGeometry },
    Gram { h: Var, batch: usize, n: usize, d: usize, scale: f64 },
    DiagScan { decay: Var, drive: Var, backend: ScanBackend },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::MatmulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulBias(a, b)
            | Op::Bmm { a, b, .. }
            | Op::BmmBt { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Unary(a, _)
            | Op::Softmax(a)
            | Op::MaskedSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanAxis0(a)
            | Op::Reshape(a)
            | Op::Tile(a, _)
            | Op::SliceLast { a, .. }
            | Op::SliceRows { a, .. } => vec![*a],
            Op::ConcatLast(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Gram { h, .. } => vec![*h],
            Op::DiagScan { decay, drive, .. } => vec![*decay, *drive],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Op-specific activations needed by the backward rule.
    saved: Vec<f64>,
}

/// Computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; absent entries are zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` is not on the loss path.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn trailing_matches(shape: &[usize], tail: &[usize]) -> bool {
    !tail.is_empty() && shape.len() >= tail.len() && shape[shape.len() - tail.len()..] == *tail
}

fn batch_dims3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, m, k] => Some((b, m, k)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, saved: Vec<f64>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            saved: vec![],
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            saved: vec![],
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), vec![]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(out, Op::MatmulBt(a, b), vec![]))
    }

    /// Batched product `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((batch, m, k), (b2, k2, n)) = match (batch_dims3(&sa), batch_dims3(&sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::dim("bmm", &sa, &sb)),
        };
        if batch != b2 || k != k2 {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            tensor::gemm_nn(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.push(value, Op::Bmm { a, b, batch, m, k, n }, vec![]))
    }

    /// Batched `[B×m×k] · [B×n×k]ᵀ`.
    pub fn bmm_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((batch, m, k), (b2, n, k2)) = match (batch_dims3(&sa), batch_dims3(&sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::dim("bmm_bt", &sa, &sb)),
        };
        if batch != b2 || k != k2 {
            return Err(Error::dim("bmm_bt", &sa, &sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            tensor::gemm_nt(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.push(value, Op::BmmBt { a, b, batch, m, k, n }, vec![]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), vec![]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), vec![]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), vec![]))
    }

    fn broadcast_trailing(&self, a: Var, bias: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(bias));
        if !trailing_matches(av.shape(), bv.shape()) {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let n = bv.len();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// `a + bias` where `bias` matches the trailing dimensions of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.broadcast_trailing(a, bias, "add_bias", |x, y| x + y)?;
        Ok(self.push(out, Op::AddBias(a, bias), vec![]))
    }

    /// `a ⊙ factor` where `factor` matches the trailing dimensions of `a`.
    pub fn mul_bias(&mut self, a: Var, factor: Var) -> Result<Var> {
        let out = self.broadcast_trailing(a, factor, "mul_bias", |x, y| x * y)?;
        Ok(self.push(out, Op::MulBias(a, factor), vec![]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        Ok(self.push(out, Op::Scale(a, c), vec![]))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| f.apply(x));
        Ok(self.push(out, Op::Unary(a, f), vec![]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        Ok(self.push(out, Op::Softmax(a), vec![]))
    }

    /// Softmax over the last axis restricted to positions with `keep[j]`;
    /// the rest get probability exactly zero. At least one position must be kept.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        if keep.len() != n {
            return Err(Error::dim("masked_softmax", v.shape(), &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Contract("masked_softmax needs at least one unmasked position".into()));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            tensor::masked_softmax_in_place(row, keep);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(value, Op::MaskedSoftmax(a), vec![]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
            // ln(1 + Σ_{i≠arg} e^{x_i - max}) keeps tiny tails exact.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let tail = rest.ln_1p();
            for x in row.iter_mut() {
                *x = (*x - max) - tail;
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(value, Op::LogSoftmax(a), vec![]))
    }

    /// Parameter-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(value, Op::LayerNorm(a), inv_std))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), vec![]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), vec![]))
    }

    /// Mean over the leading axis: `[T × rest] → [rest]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 2 {
            return Err(Error::Shape {
                shape: v.shape().to_vec(),
                reason: "mean_axis0 needs rank ≥ 2".into(),
            });
        }
        let t = v.shape()[0];
        let rest = v.len() / t;
        let mut out = vec![0.0; rest];
        for chunk in v.data().chunks(rest) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        let value = Tensor::from_parts(v.shape()[1..].to_vec(), out);
        Ok(self.push(value, Op::MeanAxis0(a), vec![]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), vec![]))
    }

    /// Repeats `a` `times` times along the leading axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Result<Var> {
        let v = self.value(a);
        if times == 0 || v.rank() == 0 {
            return Err(Error::Shape {
                shape: v.shape().to_vec(),
                reason: format!("cannot tile {times} times"),
            });
        }
        let mut shape = v.shape().to_vec();
        shape[0] *= times;
        let data = v.data().repeat(times);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Tile(a, times), vec![]))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Contract("empty concat".into()))?).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..s.len() - 1] != *lead {
                return Err(Error::dim("concat_last", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), vec![]))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let w = *v.shape().last().unwrap_or(&0);
        if len == 0 || start + len > w {
            return Err(Error::Shape {
                shape: v.shape().to_vec(),
                reason: format!("slice {start}..{} out of range", start + len),
            });
        }
        let data = v.data().chunks(w).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::SliceLast { a, start }, vec![]))
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Contract("empty concat".into()))?).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::dim("concat_rows", &first, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), vec![]))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let rows = *v.shape().first().unwrap_or(&0);
        if len == 0 || start + len > rows {
            return Err(Error::Shape {
                shape: v.shape().to_vec(),
                reason: format!("row slice {start}..{} out of range", start + len),
            });
        }
        let stride = v.len() / rows;
        let data = v.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::SliceRows { a, start }, vec![]))
    }

    /// Grouped temporal convolution, see [`tensor::grouped_conv1d`].
    pub fn conv1d(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let geo = Conv1dGeometry::new(self.shape(x), self.shape(w), groups)?;
        let out = tensor::conv1d_forward(&geo, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(vec![geo.len, geo.out_channels], out);
        Ok(self.push(value, Op::Conv1d { x, w, geo }, vec![]))
    }

    /// Scaled Gram matrices `G[b] = scale · H[b] H[b]ᵀ` for `H: [B×N×d]`.
    ///
    /// Each unordered pair is computed once and mirrored, so `G[b]` is exactly
    /// symmetric.
    pub fn gram(&mut self, h: Var, scale: f64) -> Result<Var> {
        let s = self.shape(h).to_vec();
        let (batch, n, d) = batch_dims3(&s).ok_or_else(|| Error::Shape {
            shape: s.clone(),
            reason: "gram expects [B × N × d]".into(),
        })?;
        let hv = self.value(h).data();
        let mut out = vec![0.0; batch * n * n];
        for b in 0..batch {
            let hb = &hv[b * n * d..(b + 1) * n * d];
            let gb = &mut out[b * n * n..(b + 1) * n * n];
            for i in 0..n {
                for j in i..n {
                    let v = scale * tensor::dot(&hb[i * d..(i + 1) * d], &hb[j * d..(j + 1) * d]);
                    gb[i * n + j] = v;
                    gb[j * n + i] = v;
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, n, n], out);
        Ok(self.push(value, Op::Gram { h, batch, n, d, scale }, vec![]))
    }

    /// Diagonal linear recurrence over `[T × width]` decays and drives.
    ///
    /// Only the sequential backend is differentiable; a parallel-backend node
    /// on the loss path makes `backward` fail.
    pub fn diag_scan(&mut self, decay: Var, drive: Var, backend: ScanBackend) -> Result<Var> {
        let (da, db) = (self.value(decay), self.value(drive));
        if da.shape() != db.shape() || da.rank() != 2 {
            return Err(Error::dim("diag_scan", da.shape(), db.shape()));
        }
        let width = da.shape()[1];
        let states = scan::scan(da.data(), db.data(), width, backend);
        let value = Tensor::from_parts(da.shape().to_vec(), states);
        Ok(self.push(value, Op::DiagScan { decay, drive, backend }, vec![]))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let out = &node.value;
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[1];
                let mut ga = vec![0.0; m * k];
                tensor::gemm_nt(gd, val(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                tensor::gemm_tn(val(*a).data(), gd, &mut gb, k, m, n);
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::MatmulBt(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[0];
                let mut ga = vec![0.0; m * k];
                tensor::gemm_nn(gd, val(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                tensor::gemm_tn(gd, val(*a).data(), &mut gb, n, m, k);
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..*batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    tensor::gemm_nt(gi, &bv[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    tensor::gemm_tn(&av[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::BmmBt { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * n * k];
                for i in 0..*batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    tensor::gemm_nn(gi, &bv[i * n * k..(i + 1) * n * k], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    tensor::gemm_tn(gi, &av[i * m * k..(i + 1) * m * k], &mut gb[i * n * k..(i + 1) * n * k], n, m, k);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let ga = g.zip_with(val(*b), "mul", |x, y| x * y)?;
                let gb = g.zip_with(val(*a), "mul", |x, y| x * y)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(a, bias) => {
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                vec![(*a, g.clone()), (*bias, like(*bias, gb))]
            }
            Op::MulBias(a, factor) => {
                let f = val(*factor).data();
                let n = f.len();
                let ga = gd.chunks(n).flat_map(|row| row.iter().zip(f).map(|(x, y)| x * y)).collect();
                let mut gf = vec![0.0; n];
                for (grow, arow) in gd.chunks(n).zip(val(*a).data().chunks(n)) {
                    for ((o, x), y) in gf.iter_mut().zip(grow).zip(arow) {
                        *o += x * y;
                    }
                }
                vec![(*a, like(*a, ga)), (*factor, like(*factor, gf))]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Unary(a, f) => {
                let data = val(*a)
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gd)
                    .map(|((&x, &y), &gi)| gi * f.derivative(x, y))
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut data = Vec::with_capacity(gd.len());
                for (yrow, grow) in out.data().chunks(n).zip(gd.chunks(n)) {
                    let inner = tensor::dot(yrow, grow);
                    data.extend(yrow.iter().zip(grow).map(|(y, gi)| y * (gi - inner)));
                }
                vec![(*a, like(*a, data))]
            }
            Op::LogSoftmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut data = Vec::with_capacity(gd.len());
                for (yrow, grow) in out.data().chunks(n).zip(gd.chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    data.extend(yrow.iter().zip(grow).map(|(y, gi)| gi - y.exp() * total));
                }
                vec![(*a, like(*a, data))]
            }
            Op::LayerNorm(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut data = Vec::with_capacity(gd.len());
                for ((yrow, grow), is) in out.data().chunks(n).zip(gd.chunks(n)).zip(&node.saved) {
                    let gmean = grow.iter().sum::<f64>() / n as f64;
                    let gy = tensor::dot(grow, yrow) / n as f64;
                    data.extend(yrow.iter().zip(grow).map(|(y, gi)| is * (gi - gmean - y * gy)));
                }
                vec![(*a, like(*a, data))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item() / n))]
            }
            Op::MeanAxis0(a) => {
                let t = val(*a).shape()[0];
                let inv = 1.0 / t as f64;
                let data = gd.iter().map(|x| x * inv).collect::<Vec<_>>().repeat(t);
                vec![(*a, like(*a, data))]
            }
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
            Op::Tile(a, times) => {
                let n = val(*a).len();
                let mut data = vec![0.0; n];
                for chunk in gd.chunks(n).take(*times) {
                    for (o, x) in data.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                vec![(*a, like(*a, data))]
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = *val(p).shape().last().unwrap();
                    let data = (0..rows)
                        .flat_map(|r| gd[r * total + offset..r * total + offset + w].iter().copied())
                        .collect();
                    res.push((p, like(p, data)));
                    offset += w;
                }
                res
            }
            Op::SliceLast { a, start } => {
                let w = *val(*a).shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut data = vec![0.0; val(*a).len()];
                for (r, grow) in gd.chunks(len).enumerate() {
                    data[r * w + start..r * w + start + len].copy_from_slice(grow);
                }
                vec![(*a, like(*a, data))]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).len();
                    res.push((p, like(p, gd[offset..offset + n].to_vec())));
                    offset += n;
                }
                res
            }
            Op::SliceRows { a, start } => {
                let av = val(*a);
                let stride = av.len() / av.shape()[0];
                let mut data = vec![0.0; av.len()];
                data[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                vec![(*a, like(*a, data))]
            }
            Op::Conv1d { x, w, geo } => {
                let (gx, gw) = tensor::conv1d_backward(geo, val(*x).data(), val(*w).data(), gd);
                vec![(*x, like(*x, gx)), (*w, like(*w, gw))]
            }
            Op::Gram { h, batch, n, d, scale } => {
                let (n, d) = (*n, *d);
                let hv = val(*h).data();
                let mut gh = vec![0.0; batch * n * d];
                for b in 0..*batch {
                    let gb = &gd[b * n * n..(b + 1) * n * n];
                    let hb = &hv[b * n * d..(b + 1) * n * d];
                    for i in 0..n {
                        let dst = &mut gh[b * n * d + i * d..b * n * d + (i + 1) * d];
                        for j in 0..n {
                            let c = scale * (gb[i * n + j] + gb[j * n + i]);
                            if c == 0.0 {
                                continue;
                            }
                            for (o, hj) in dst.iter_mut().zip(&hb[j * d..(j + 1) * d]) {
                                *o += c * hj;
                            }
                        }
                    }
                }
                vec![(*h, like(*h, gh))]
            }
            Op::DiagScan { decay, drive, backend } => {
                if *backend != ScanBackend::Sequential {
                    return Err(Error::Contract(
                        "the parallel scan backend is inference-only; differentiate the sequential backend".into(),
                    ));
                }
                let width = out.shape()[1];
                let (ga, gb) = scan::scan_backward(val(*decay).data(), out.data(), gd, width);
                vec![(*decay, like(*decay, ga)), (*drive, like(*drive, gb))]
            }
        })
    }
}
