//! Define-by-run reverse-mode autodiff over dense 2-D tensors.
//!
//! Every op appends a node holding its forward value; nodes are therefore
//! already in topological order and `backward` is a single reverse sweep.
//! Broadcasting is limited to bias-add and the column-scale op.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Row index meaning "a row of zeros" in [`Tape::gather_rows`].
pub const ZERO_ROW: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    Im2Col {
        x: Var,
        kernel: usize,
        dilation: usize,
        stride: usize,
        pad_left: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormFixed {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaskedL1 {
        x: Var,
        target: Vec<T>,
        row_mask: Vec<T>,
        denom: T,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = params.get(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (br, bc) = dims2(self.value(b));
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk || self.value(a).shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            trans_b,
            m,
            k,
            n,
            self.value(a).values(),
            self.value(b).values(),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if self.value(b).numel() != c {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let bv = self.value(b).values();
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o = *o + *b);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    fn zip_values(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("{what} {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.values().iter().zip(bv.values()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        let out = xv.values().iter().map(|v| f(*v)).collect();
        Tensor::new(xv.shape().to_vec(), out).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.map(x, |a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| T::one() / (T::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).values().iter().any(|v| *v <= T::zero()) {
            return Err(Error::invalid("sqrt of non-positive value"));
        }
        let v = self.map(x, |a| a.sqrt());
        Ok(self.push(v, Op::Sqrt(x), &[x]))
    }

    /// Scale row `r` of `x` by `w[r]` (`w` is `R×1`).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if self.value(w).numel() != r {
            return Err(Error::shape(format!(
                "column scale {:?} for {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let wv = self.value(w).values();
        let mut out = self.value(x).values().to_vec();
        for (row, s) in out.chunks_mut(c.max(1)).zip(wv) {
            row.iter_mut().for_each(|v| *v = *v * *s);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::MulCol(x, w), &[x, w]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            cols += self.value(*p).cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            rows += v.rows();
            out.extend_from_slice(v.values());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if start + len > r {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.value(x).values()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], out)?;
        Ok(self.push(value, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    /// Rows of `x` in the order of `idx`; [`ZERO_ROW`] yields zeros.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i == ZERO_ROW {
                out.extend(std::iter::repeat_n(T::zero(), c));
            } else if i < r {
                out.extend_from_slice(&xv[i * c..(i + 1) * c]);
            } else {
                return Err(Error::shape(format!("gather row {i} of {r}")));
            }
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Same values under a new `rows×cols` shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshape(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Flat elements of `x` at `idx`, as a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x).values();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(format!("pick index {bad} of {}", xv.len())));
        }
        let out = idx.iter().map(|&i| xv[i]).collect();
        let value = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(value, Op::Pick(x, idx.to_vec()), &[x]))
    }

    /// Unfold temporal context: row `t` of the output holds input rows
    /// `t·stride + j·dilation − pad_left` for `j < kernel` (zeros outside).
    pub fn im2col(
        &mut self,
        x: Var,
        kernel: usize,
        dilation: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (t, c) = dims2(self.value(x));
        let span = dilation * (kernel - 1) + 1;
        let padded = t + pad_left + pad_right;
        if kernel == 0 || stride == 0 || padded < span {
            return Err(Error::invalid(format!(
                "sequence of {t} frames is shorter than kernel span {span}"
            )));
        }
        let out_rows = (padded - span) / stride + 1;
        let xv = self.value(x).values();
        let mut out = vec![T::zero(); out_rows * kernel * c];
        for o in 0..out_rows {
            for j in 0..kernel {
                let src = (o * stride + j * dilation) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    out[(o * kernel + j) * c..(o * kernel + j + 1) * c].copy_from_slice(&xv[s * c..(s + 1) * c]);
                }
            }
        }
        let value = Tensor::new(vec![out_rows, kernel * c], out)?;
        Ok(self.push(
            value,
            Op::Im2Col {
                x,
                kernel,
                dilation,
                stride,
                pad_left,
            },
            &[x],
        ))
    }

    /// Column means, `1×C`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if r == 0 {
            return Err(Error::shape("mean over zero rows"));
        }
        let mut out = vec![T::zero(); c];
        for row in self.value(x).values().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o = *o + *v);
        }
        let n = T::lit(r as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
        let value = Tensor::new(vec![1, c], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.values().iter().copied().sum();
        let m = s / T::lit(v.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = dims2(self.value(x));
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vec![r, c], out).expect("same shape");
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(logits));
        if labels.len() != r {
            return Err(Error::shape(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).values().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            loss = loss + lse - row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / T::lit(r as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Divide each row by its L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        let mut out = self.value(x).values().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n <= T::lit(1e-12) || !n.is_finite() {
                return Err(Error::ZeroNorm);
            }
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::L2NormRows { x, norms }, &[x]))
    }

    /// Batch normalization using the statistics of `x` itself (train mode).
    /// Returns the output and the batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (r, c) = dims2(self.value(x));
        if r < 2 {
            return Err(Error::invalid("batch norm in train mode needs at least 2 rows"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch norm affine parameters"));
        }
        let xv = self.value(x).values();
        let n = T::lit(r as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m = *m + *v);
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics (eval mode).
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch norm running statistics"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch norm affine parameters"));
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).values(), self.value(beta).values());
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).values().chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean absolute error over rows with `row_mask = 1`.
    pub fn masked_l1(&mut self, x: Var, target: &[T], row_mask: &[T]) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if target.len() != r * c || row_mask.len() != r {
            return Err(Error::shape(format!(
                "masked_l1: input {r}×{c}, target {}, mask {}",
                target.len(),
                row_mask.len()
            )));
        }
        let active: T = row_mask.iter().copied().sum();
        if active <= T::zero() {
            return Err(Error::invalid("all frames are masked"));
        }
        let denom = active * T::lit(c as f64);
        let xv = self.value(x).values();
        let mut total = T::zero();
        for i in 0..r {
            if row_mask[i] == T::zero() {
                continue;
            }
            let s: T = (0..c).map(|j| (xv[i * c + j] - target[i * c + j]).abs()).sum();
            total = total + s * row_mask[i];
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            value,
            Op::MaskedL1 {
                x,
                target: target.to_vec(),
                row_mask: row_mask.to_vec(),
                denom,
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut out);
        }

        // Parameters bound but unreachable from the loss get zero gradients.
        for (&id, &v) in &self.bound {
            if self.nodes[v.0].requires_grad && !out.iter().any(|(p, _)| *p == id) {
                out.push((id, vec![T::zero(); self.nodes[v.0].value.numel()]));
            }
        }
        out.sort_by_key(|(p, _)| *p);
        Ok(Gradients(out))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Vec<(ParamId, Vec<T>)>) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let y = &nodes[i].value;
        // Accumulate into a parent's gradient buffer when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => out.push((*id, g.to_vec())),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(val(*a));
                let n = y.cols();
                let (av, bv) = (val(*a).values(), val(*b).values());
                if *trans_b {
                    acc(*a, &mut |d| T::gemm(false, false, m, n, k, g, bv, d, true));
                    acc(*b, &mut |d| T::gemm(true, false, n, m, k, g, av, d, true));
                } else {
                    acc(*a, &mut |d| T::gemm(false, true, m, n, k, g, bv, d, true));
                    acc(*b, &mut |d| T::gemm(true, false, k, m, n, av, g, d, true));
                }
            }
            Op::AddBias(x, b) => {
                let c = y.cols();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d = *d - *g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).values(), val(*b).values());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * av[j];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g * *c)),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.values()) {
                    *d = *d + *g * *y * (T::one() - *y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.values()) {
                    *d = *d + *g * (T::one() - *y * *y);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.values()) {
                    if *y > T::zero() {
                        *d = *d + *g;
                    }
                }
            }),
            Op::Sqrt(x) => acc(*x, &mut |d| {
                let half = T::lit(0.5);
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.values()) {
                    *d = *d + *g * half / *y;
                }
            }),
            Op::MulCol(x, w) => {
                let c = y.cols().max(1);
                let (xv, wv) = (val(*x).values(), val(*w).values());
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for (dd, gg) in drow.iter_mut().zip(grow) {
                            *dd = *dd + *gg * wv[r];
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for (r, (grow, xrow)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                        let s: T = grow.iter().zip(xrow).map(|(a, b)| *a * *b).sum();
                        d[r] = d[r] + s;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    acc(*p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(pc).zip(g.chunks(total)) {
                            add_into(drow, &grow[off..off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    acc(*p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = y.cols();
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(x, start) => {
                let (len, c) = (y.cols(), val(*x).cols());
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::GatherRows(x, idx) => {
                let c = y.cols();
                acc(*x, &mut |d| {
                    for (o, &src) in idx.iter().enumerate() {
                        if src != ZERO_ROW {
                            add_into(&mut d[src * c..(src + 1) * c], &g[o * c..(o + 1) * c]);
                        }
                    }
                });
            }
            Op::Pick(x, idx) => acc(*x, &mut |d| {
                for (o, &src) in idx.iter().enumerate() {
                    d[src] = d[src] + g[o];
                }
            }),
            Op::Im2Col {
                x,
                kernel,
                dilation,
                stride,
                pad_left,
            } => {
                let (t, c) = dims2(val(*x));
                let out_rows = y.rows();
                acc(*x, &mut |d| {
                    for o in 0..out_rows {
                        for j in 0..*kernel {
                            let src = (o * stride + j * dilation) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                let base = (o * kernel + j) * c;
                                add_into(&mut d[s * c..(s + 1) * c], &g[base..base + c]);
                            }
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, c) = dims2(val(*x));
                let n = T::lit(r as f64);
                acc(*x, &mut |d| {
                    for drow in d.chunks_mut(c) {
                        for (dd, gg) in drow.iter_mut().zip(g) {
                            *dd = *dd + *gg / n;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let n = T::lit(val(*x).numel().max(1) as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0] / n))
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols().max(1);
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.values().chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let (r, c) = dims2(val(*logits));
                let scale = g[0] / T::lit(r as f64);
                acc(*logits, &mut |d| {
                    for (row, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == lab { T::one() } else { T::zero() };
                            d[row * c + j] = d[row * c + j] + scale * (probs[row * c + j] - onehot);
                        }
                    }
                });
            }
            Op::L2NormRows { x, norms } => {
                let c = y.cols().max(1);
                acc(*x, &mut |d| {
                    for (r, ((drow, grow), yrow)) in
                        d.chunks_mut(c).zip(g.chunks(c)).zip(y.values().chunks(c)).enumerate()
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            drow[j] = drow[j] + (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = dims2(y);
                let gv = val(*gamma).values();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for row in 0..r {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + g[row * c + j];
                        sum_gx[j] = sum_gx[j] + g[row * c + j] * xhat[row * c + j];
                    }
                }
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                let n = T::lit(r as f64);
                acc(*x, &mut |d| {
                    for row in 0..r {
                        for j in 0..c {
                            let k = row * c + j;
                            // dxhat = g·γ; sums over dxhat scale by γ as well.
                            let v = gv[j] * inv_std[j] / n * (n * g[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                            d[k] = d[k] + v;
                        }
                    }
                });
            }
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let gv = val(*gamma).values();
                acc(*beta, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
                acc(*gamma, &mut |d| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] = d[j] + grow[j] * hrow[j];
                        }
                    }
                });
                acc(*x, &mut |d| {
                    for (k, dd) in d.iter_mut().enumerate() {
                        let j = k % c;
                        *dd = *dd + g[k] * gv[j] * inv_std[j];
                    }
                });
            }
            Op::MaskedL1 {
                x,
                target,
                row_mask,
                denom,
            } => {
                let c = val(*x).cols();
                let xv = val(*x).values();
                acc(*x, &mut |d| {
                    for (k, dd) in d.iter_mut().enumerate() {
                        let m = row_mask[k / c];
                        if m == T::zero() {
                            continue;
                        }
                        let diff = xv[k] - target[k];
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *dd = *dd + g[0] * s * m / *denom;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|v| (*v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", t(&[3], &[1.0, -2.0, 0.5]), true).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let loss = tape.sum(wv);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_weights_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", t(&[2], &[1.0, 2.0]), true).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", t(&[1], &[1.0]), true).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let loss = tape.sum(wv);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gather_zero_row_and_im2col_padding() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let g = tape.gather_rows(x, &[2, ZERO_ROW, 0]).unwrap();
        assert_eq!(tape.value(g).values(), &[3.0, 0.0, 1.0]);
        let c = tape.im2col(x, 3, 1, 1, 1, 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 3]);
        assert_eq!(tape.value(c).row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(tape.value(c).row(2), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(tape.cross_entropy(x, &[2]).is_err());
        let ce = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(ce).values()[0] - 2f64.ln()).abs() < 1e-12);
    }
}
