//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends one node holding its output value and the inputs
//! it was computed from. Node indices are allocated in execution order, so
//! the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::ndcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Periodic,
    Zero,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy { x: Var, s: Var },
    OffsetBy { x: Var, s: Var },
    AddRow { x: Var, b: Var },
    MulRow { x: Var, g: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Min { x: Var, arg: usize },
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Cos(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Conv1d { signal: Var, filter: Var, stride: usize, boundary: Boundary },
    Convolve1d { signal: Var, filter: Var, boundary: Boundary },
    Upsample { x: Var, stride: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`], with unreachable nodes reported as zeros.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected rank 1 or 2, got {:?}", t.shape())))
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Output shape keeping the rank of `like` with `rows` leading entries.
fn with_rows(like: &Tensor, rows: usize, cols: usize) -> Vec<usize> {
    if like.rank() == 1 {
        vec![rows]
    } else {
        vec![rows, cols]
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::Offset(x))
    }

    fn scalar_operand(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if !t.is_scalar() {
            return Err(Error::shape(op, format!("expected scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// `x * s` for a scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_operand("scale_by", s)?;
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// `x + s` for a scalar node `s`.
    pub fn offset_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_operand("offset_by", s)?;
        let out = self.value(x).map(|v| v + k);
        Ok(self.push(out, Op::OffsetBy { x, s }, &[x, s]))
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_row", self.value(x))?;
        if self.value(b).len() != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let (tx, tb) = (self.value(x), self.value(b));
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (c, v) in data[r * n..(r + 1) * n].iter_mut().enumerate() {
                *v += tb.data()[c];
            }
        }
        let out = Tensor::new([m, n], data)?;
        Ok(self.push(out, Op::AddRow { x, b }, &[x, b]))
    }

    /// Multiplies every row of an M×N matrix elementwise by a length-N vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = matrix_dims("mul_row", self.value(x))?;
        if self.value(g).len() != n {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", self.shape(x), self.shape(g))));
        }
        let (tx, tg) = (self.value(x), self.value(g));
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (c, v) in data[r * n..(r + 1) * n].iter_mut().enumerate() {
                *v *= tg.data()[c];
            }
        }
        let out = Tensor::new([m, n], data)?;
        Ok(self.push(out, Op::MulRow { x, g }, &[x, g]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("transpose", t)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let out = Tensor::new([n, m], data)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Rows `start..start + len` of a vector or matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("slice_rows", t)?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}..{} of {m}", start + len)));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(with_rows(t, len, n), data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("slice_cols", t)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new([m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Stacks matrices (or vectors) with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let (_, n) = dims2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            let (m, c) = dims2("concat_rows", t)?;
            if c != n || t.rank() != self.value(first).rank() {
                return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", self.shape(first), t.shape())));
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(with_rows(self.value(first), rows, n), data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let (m, _) = matrix_dims("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = matrix_dims("concat_cols", self.value(x))?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", self.shape(first), self.shape(x))));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new([m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// `out[i] = x[idx[i]]` along the leading axis.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("gather_rows", t)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("index out of {m} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(with_rows(t, idx.len(), n), data)?;
        Ok(self.push(out, Op::GatherRows { x, idx }, &[x]))
    }

    /// Flat element gather into an arbitrary output shape.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.iter().any(|&i| i >= t.len()) {
            return Err(Error::shape("gather", format!("index out of {} elements", t.len())));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { x, idx }, &[x]))
    }

    /// Single element as a scalar node.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather(x, vec![i], &[])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Smallest element; the gradient flows to its first occurrence.
    pub fn min(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (arg, &v) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, &f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        self.push(Tensor::scalar(v), Op::Min { x, arg }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("softmax_rows", t)?;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows input contains NaN".into()));
        }
        let mut data = t.data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Standardizes each row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("layer_norm_rows", t)?;
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new([m, n], data)?;
        Ok(self.push(out, Op::LayerNormRows { x, inv_std }, &[x]))
    }

    /// Strided correlation along the leading axis, per column:
    /// `out[n] = Σ_k signal[n·stride + k] · filter[k]`.
    pub fn conv1d_stride(&mut self, signal: Var, filter: Var, stride: usize, boundary: Boundary) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Argument("conv1d_stride: stride must be at least 1".into()));
        }
        let (ts, tf) = (self.value(signal), self.value(filter));
        let (len, cols) = dims2("conv1d_stride", ts)?;
        if tf.rank() != 1 {
            return Err(Error::shape("conv1d_stride", format!("filter must be a vector, got {:?}", tf.shape())));
        }
        let out_len = len.div_ceil(stride);
        let f = tf.data();
        let s = ts.data();
        let mut out = vec![0.0; out_len * cols];
        for n in 0..out_len {
            for (k, &fk) in f.iter().enumerate() {
                let Some(src) = tap_index(n * stride + k, len, boundary) else {
                    continue;
                };
                for c in 0..cols {
                    out[n * cols + c] += s[src * cols + c] * fk;
                }
            }
        }
        let out = Tensor::new(with_rows(ts, out_len, cols), out)?;
        Ok(self.push(out, Op::Conv1d { signal, filter, stride, boundary }, &[signal, filter]))
    }

    /// Causal convolution along the leading axis, per column:
    /// `out[m] = Σ_k signal[m − k] · filter[k]`. Composed with
    /// [`Tape::upsample_zeros`] it is the adjoint of [`Tape::conv1d_stride`].
    pub fn convolve1d(&mut self, signal: Var, filter: Var, boundary: Boundary) -> Result<Var> {
        let (ts, tf) = (self.value(signal), self.value(filter));
        let (len, cols) = dims2("convolve1d", ts)?;
        if tf.rank() != 1 {
            return Err(Error::shape("convolve1d", format!("filter must be a vector, got {:?}", tf.shape())));
        }
        let f = tf.data();
        let s = ts.data();
        let mut out = vec![0.0; len * cols];
        for m in 0..len {
            for (k, &fk) in f.iter().enumerate() {
                let Some(src) = back_index(m, k, len, boundary) else {
                    continue;
                };
                for c in 0..cols {
                    out[m * cols + c] += s[src * cols + c] * fk;
                }
            }
        }
        let out = Tensor::new(ts.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Convolve1d { signal, filter, boundary }, &[signal, filter]))
    }

    /// Zero insertion: `out[n·stride] = x[n]`, other entries zero;
    /// `out_len` rows, with `x` holding `ceil(out_len / stride)` rows.
    pub fn upsample_zeros(&mut self, x: Var, stride: usize, out_len: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Argument("upsample_zeros: stride must be at least 1".into()));
        }
        let t = self.value(x);
        let (len, cols) = dims2("upsample_zeros", t)?;
        if out_len.div_ceil(stride) != len {
            return Err(Error::shape("upsample_zeros", format!("{len} rows cannot fill {out_len} at stride {stride}")));
        }
        let mut out = vec![0.0; out_len * cols];
        for n in 0..len {
            out[n * stride * cols..(n * stride + 1) * cols].copy_from_slice(&t.data()[n * cols..(n + 1) * cols]);
        }
        let out = Tensor::new(with_rows(t, out_len, cols), out)?;
        Ok(self.push(out, Op::Upsample { x, stride }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(vb).for_each(|((d, gi), y)| *d += gi * y));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(va).for_each(|((d, gi), x)| *d += gi * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(vb).for_each(|((d, gi), y)| *d += gi / y));
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Neg(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi)),
            Op::Scale(x, k) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * k)),
            Op::Offset(x) | Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::ScaleBy { x, s: sv } => {
                let k = val(*sv)[0];
                let vx = val(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * k));
                let dk: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                acc(*sv, &mut |s| s[0] += dk);
            }
            Op::OffsetBy { x, s: sv } => {
                acc(*x, &mut |s| add_into(s, g));
                let dk: f64 = g.iter().sum();
                acc(*sv, &mut |s| s[0] += dk);
            }
            Op::AddRow { x, b } => {
                let n = val(*b).len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                });
            }
            Op::MulRow { x, g: gv } => {
                let n = val(*gv).len();
                let (vx, vg) = (val(*x), val(*gv));
                acc(*x, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i] += gi * vg[i % n];
                    }
                });
                acc(*gv, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * vx[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            for (d, gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                acc(*x, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let cols = self.nodes[x.0].value.dims2().map_or(1, |d| d.1);
                acc(*x, &mut |s| add_into(&mut s[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let src_cols = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |s| {
                    for r in 0..m {
                        add_into(&mut s[r * src_cols + start..r * src_cols + start + n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.len();
                    acc(x, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut col = 0;
                for &x in xs {
                    let w = self.nodes[x.0].value.shape()[1];
                    acc(x, &mut |s| {
                        for r in 0..m {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = self.nodes[x.0].value.dims2().map_or(1, |d| d.1);
                acc(*x, &mut |s| {
                    for (o, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * cols..(i + 1) * cols], &g[o * cols..(o + 1) * cols]);
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |s| {
                for (o, &i) in idx.iter().enumerate() {
                    s[i] += g[o];
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Min { x, arg } => acc(*x, &mut |s| s[*arg] += g[0]),
            Op::Exp(x) => acc(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((d, gi), y)| *d += gi * y)),
            Op::Ln(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(vx).for_each(|((d, gi), v)| *d += gi / v));
            }
            Op::Sqrt(x) => acc(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((d, gi), y)| *d += gi * 0.5 / y)),
            Op::Recip(x) => acc(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((d, gi), y)| *d -= gi * y * y)),
            Op::Cos(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(vx).for_each(|((d, gi), v)| *d -= gi * v.sin()));
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((d, gi), y)| *d += gi * y * (1.0 - y)))
            }
            Op::Tanh(x) => acc(*x, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((d, gi), y)| *d += gi * (1.0 - y * y))),
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2().unwrap();
                acc(*x, &mut |s| {
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] += y[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let (m, n) = node.value.dims2().unwrap();
                acc(*x, &mut |s| {
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            s[r * n + c] += inv_std[r] * (gr[c] - gm - y[c] * gy);
                        }
                    }
                });
            }
            Op::Conv1d { signal, filter, stride, boundary } => {
                let (len, cols) = self.nodes[signal.0].value.dims2().unwrap();
                let out_len = len.div_ceil(*stride);
                let (vs, vf) = (val(*signal), val(*filter));
                acc(*signal, &mut |s| {
                    for n in 0..out_len {
                        for (k, &fk) in vf.iter().enumerate() {
                            if let Some(src) = tap_index(n * stride + k, len, *boundary) {
                                for c in 0..cols {
                                    s[src * cols + c] += g[n * cols + c] * fk;
                                }
                            }
                        }
                    }
                });
                acc(*filter, &mut |s| {
                    for n in 0..out_len {
                        for (k, d) in s.iter_mut().enumerate() {
                            if let Some(src) = tap_index(n * stride + k, len, *boundary) {
                                for c in 0..cols {
                                    *d += g[n * cols + c] * vs[src * cols + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::Convolve1d { signal, filter, boundary } => {
                let (len, cols) = self.nodes[signal.0].value.dims2().unwrap();
                let (vs, vf) = (val(*signal), val(*filter));
                acc(*signal, &mut |s| {
                    for m in 0..len {
                        for (k, &fk) in vf.iter().enumerate() {
                            if let Some(src) = back_index(m, k, len, *boundary) {
                                for c in 0..cols {
                                    s[src * cols + c] += g[m * cols + c] * fk;
                                }
                            }
                        }
                    }
                });
                acc(*filter, &mut |s| {
                    for m in 0..len {
                        for (k, d) in s.iter_mut().enumerate() {
                            if let Some(src) = back_index(m, k, len, *boundary) {
                                for c in 0..cols {
                                    *d += g[m * cols + c] * vs[src * cols + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, stride } => {
                let (len, cols) = self.nodes[x.0].value.dims2().unwrap();
                acc(*x, &mut |s| {
                    for n in 0..len {
                        add_into(&mut s[n * cols..(n + 1) * cols], &g[n * stride * cols..(n * stride + 1) * cols]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn tap_index(pos: usize, len: usize, boundary: Boundary) -> Option<usize> {
    match boundary {
        Boundary::Periodic => Some(pos % len),
        Boundary::Zero => (pos < len).then_some(pos),
    }
}

fn back_index(m: usize, k: usize, len: usize, boundary: Boundary) -> Option<usize> {
    match boundary {
        Boundary::Periodic => Some(wrap(m as isize - k as isize, len)),
        Boundary::Zero => m.checked_sub(k),
    }
}

/// `out += a·b` for row-major `a` (m×k) and `b` (k×n).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}
