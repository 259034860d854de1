//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! Ops are appended to the [`Graph`] in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse
//! and accumulates gradients additively into every input of every node.

use std::sync::Arc;

use rand::Rng;

use crate::kernels;
use crate::real::Real;
use crate::tensor::{BoolMatrix, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, T),
    Relu(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Huber {
        pred: Var,
        residual: Vec<T>,
        delta: T,
        norm: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor ops recorded for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(dim_err("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let data = kernels::mm_nt(av.data(), bv.data(), m, k, n);
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.numel() != av.cols() {
            return Err(dim_err("add_row", av.shape(), rv.shape()));
        }
        let cols = av.cols();
        let r = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Repeats a vector `rows` times as a `rows x n` matrix.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.numel();
        let data = xv.data().repeat(rows);
        let out = Tensor::matrix(rows, n, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::BroadcastRows(x), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise softmax over the `true` entries of `mask`; see
    /// [`kernels::masked_softmax`] for the fully-masked-row contract.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<BoolMatrix>) -> Result<Var, TensorError> {
        let out = kernels::masked_softmax(self.value(x), &mask)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != xv.cols() || bv.numel() != xv.cols() {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let ln = kernels::layer_norm_forward(xv, gv.data(), bv.data(), eps);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            ln.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: ln.xhat,
                inv_std: ln.inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. A rate of zero
    /// records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let keep: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Dropout(x, keep), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(TensorError::Index {
                what: "column slice",
                index: start + len,
                len: xv.cols(),
            });
        }
        let cols = xv.cols();
        let out = Tensor::from_fn(xv.rows(), len, |r, c| xv.data()[r * cols + start + c]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(dim_err(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.rows();
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    what: "row gather",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(rows.len(), xv.cols(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::of(xv.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sum of elementwise Huber penalties divided by `norm`. Passing the
    /// element count as `norm` gives the mean.
    pub fn huber(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        delta: T,
        norm: T,
    ) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(dim_err("huber", pv.shape(), target.shape()));
        }
        let residual: Vec<T> = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p - t)
            .collect();
        let total: T = residual.iter().map(|&r| kernels::huber(r, delta)).sum();
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::Huber {
                pred,
                residual,
                delta,
                norm,
            },
            rg,
        ))
    }

    /// Sum over rows of `-log softmax(logits)[label]`, divided by `norm`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        norm: T,
    ) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(dim_err("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                what: "class label",
                index: bad,
                len: c,
            });
        }
        let (probs, total) = kernels::softmax_xent(lv, labels);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                norm,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Returns gradients for every leaf
    /// that requires them; leaves not reached by the loss get `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("grad shape");
                leaves[id] = Some(t);
            } else {
                self.propagate(id, &g, &mut grads);
            }
        }
        self.backward_done = true;
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(a) {
                    self.accumulate(grads, a, kernels::mm_nt(g, bv.data(), m, n, k));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, kernels::mm_tn(av.data(), g, m, k, n));
                }
            }
            &Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.wants(a) {
                    self.accumulate(grads, a, kernels::mm_nn(g, bv.data(), m, n, k));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, kernels::mm_tn(g, av.data(), m, n, k));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.to_vec());
                if self.wants(row) {
                    let cols = self.value(a).cols();
                    self.accumulate(grads, row, kernels::column_sums(g, cols));
                }
            }
            &Op::BroadcastRows(x) => {
                let cols = self.value(x).numel();
                self.accumulate(grads, x, kernels::column_sums(g, cols));
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            &Op::Relu(x) => {
                let out = node.value.data();
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, d);
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![T::zero(); g.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gamma = self.value(*gain).data();
                let back = kernels::layer_norm_backward(g, xhat, inv_std, gamma, cols);
                self.accumulate(grads, *x, back.dx);
                self.accumulate(grads, *gain, back.dgain);
                self.accumulate(grads, *bias, back.dbias);
            }
            Op::Dropout(x, keep) => {
                self.accumulate(grads, *x, g.iter().zip(keep).map(|(&a, &k)| a * k).collect());
            }
            &Op::SliceCols(x, start) => {
                let xv = self.value(x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, x, d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, rows) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut d = vec![T::zero(); xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] = d[r * cols + c] + g[i * cols + c];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Huber {
                pred,
                residual,
                delta,
                norm,
            } => {
                let s = g[0] / *norm;
                let d = residual
                    .iter()
                    .map(|&r| kernels::huber_grad(r, *delta) * s)
                    .collect();
                self.accumulate(grads, *pred, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                norm,
            } => {
                let s = g[0] / *norm;
                let cols = self.value(*logits).cols();
                let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * cols + l] = d[r * cols + l] - s;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
