//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and enough
//! context to push gradients back to its inputs. One tape records one
//! loss; `backward` walks the nodes in reverse and returns the gradient of
//! that loss with respect to every recorded node. Values on the tape are
//! never mutated after they are recorded.

use std::sync::Arc;

use super::params::ParamSet;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row-to-segment assignment shared between cached graph batches and tapes.
pub type Segments = Arc<[usize]>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Var, Var),
    GatherRows(Var, Segments),
    SegmentMean {
        x: Var,
        seg: Segments,
        counts: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        seg: Segments,
        n_seg: usize,
    },
    SegmentWeightedSum {
        x: Var,
        w: Var,
        seg: Segments,
    },
    RowDot(Var, Var),
    Softmax(Var),
    SumAll(Var),
    GaussianNll(Var, Tensor),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    GatherCols(Var, Vec<usize>),
    Huber {
        x: Var,
        target: Tensor,
        delta: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients for a bound parameter set, in parameter order.
    pub fn for_params(&self, vars: &[Var], params: &ParamSet) -> Vec<Tensor> {
        vars.iter()
            .zip(params.iter())
            .map(|(v, p)| self.get_or_zeros(*v, p.value.shape()))
            .collect()
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_segments(seg: &[usize], rows: usize, n_seg: usize, what: &str) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::dim(format!(
            "{what}: {} segment ids for {rows} rows",
            seg.len()
        )));
    }
    if let Some(bad) = seg.iter().find(|&&s| s >= n_seg) {
        return Err(Error::dim(format!("{what}: segment {bad} >= {n_seg}")));
    }
    Ok(())
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records every parameter of `params` as a leaf, in order.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        params
            .iter()
            .map(|p| self.leaf(p.value.clone()))
            .collect()
    }

    /// `a · b`. A vector `a` is treated as a single row and yields a vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let shape = if av.is_vector() { vec![n] } else { vec![m, n] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if !bv.is_vector() || bv.len() != xv.cols() {
            return Err(Error::dim(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut t = xv.clone();
        let c = bv.len();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(av, bv, "add")?;
        let mut t = av.clone();
        t.add_assign(bv);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(av, bv, "sub")?;
        let mut t = av.clone();
        for (x, y) in t.data_mut().iter_mut().zip(bv.data()) {
            *x -= y;
        }
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(t, Op::Scale(a, c))
    }

    /// Elementwise `max(0, x)`; the derivative at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = leaky(*v, slope));
        self.push(t, Op::LeakyRelu(x, slope))
    }

    /// Concatenates along the last dimension; row counts must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != bv.shape().len() || av.rows() != bv.rows() {
            return Err(Error::dim(format!(
                "concat {:?} with {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let shape = if av.is_vector() {
            vec![p + q]
        } else {
            vec![av.rows(), p + q]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Segments) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::dim(format!("gather row {i} of {n}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(t, Op::GatherRows(x, idx)))
    }

    /// Mean of the rows assigned to each segment; empty segments are zero.
    pub fn segment_mean(&mut self, x: Var, seg: Segments, n_seg: usize) -> Result<Var> {
        let xv = self.value(x);
        check_segments(&seg, xv.rows(), n_seg, "segment_mean")?;
        let d = xv.cols();
        let mut counts = vec![0usize; n_seg];
        let mut out = vec![0.0; n_seg * d];
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                out[s * d..(s + 1) * d].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::matrix(n_seg, d, out)?;
        Ok(self.push(t, Op::SegmentMean { x, seg, counts }))
    }

    /// Softmax of a score vector within each segment (max-shifted).
    pub fn segment_softmax(&mut self, x: Var, seg: Segments, n_seg: usize) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_vector() {
            return Err(Error::dim("segment_softmax expects a vector"));
        }
        check_segments(&seg, xv.len(), n_seg, "segment_softmax")?;
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (&s, &v) in seg.iter().zip(xv.data()) {
            max[s] = max[s].max(v);
        }
        let mut out: Vec<f64> = seg
            .iter()
            .zip(xv.data())
            .map(|(&s, &v)| (v - max[s]).exp())
            .collect();
        let mut sum = vec![0.0; n_seg];
        for (&s, &e) in seg.iter().zip(&out) {
            sum[s] += e;
        }
        for (&s, e) in seg.iter().zip(out.iter_mut()) {
            *e /= sum[s];
        }
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::SegmentSoftmax { x, seg, n_seg }))
    }

    /// `out[s] = Σ_{r in s} w[r] · x[r]`.
    pub fn segment_weighted_sum(
        &mut self,
        x: Var,
        w: Var,
        seg: Segments,
        n_seg: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if !wv.is_vector() || wv.len() != xv.rows() {
            return Err(Error::dim("segment_weighted_sum weight length"));
        }
        check_segments(&seg, xv.rows(), n_seg, "segment_weighted_sum")?;
        let d = xv.cols();
        let mut out = vec![0.0; n_seg * d];
        for (r, &s) in seg.iter().enumerate() {
            let wr = wv.data()[r];
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(xv.row(r)) {
                *o += wr * v;
            }
        }
        let t = Tensor::matrix(n_seg, d, out)?;
        Ok(self.push(t, Op::SegmentWeightedSum { x, w, seg }))
    }

    /// Dot product of every row of `x` with the vector `v`.
    pub fn row_dot(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if !vv.is_vector() || vv.len() != xv.cols() {
            return Err(Error::dim(format!(
                "row_dot {:?} . {:?}",
                xv.shape(),
                vv.shape()
            )));
        }
        let out: Vec<f64> = (0..xv.rows())
            .map(|r| xv.row(r).iter().zip(vv.data()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::RowDot(x, v)))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::dim("softmax of empty input"));
        }
        let mut t = xv.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `0.5 · Σ (pred − target)²` over all entries: negative log-likelihood of
    /// a unit-variance Gaussian without its constant term.
    pub fn gaussian_nll(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        check_same(pv, target, "gaussian_nll")?;
        let s = 0.5
            * pv.data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
        Ok(self.push(Tensor::scalar(s), Op::GaussianNll(pred, target.clone())))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n || n == 0 {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_mut(k).zip(labels) {
            if y >= k {
                return Err(Error::dim(format!("label {y} out of {k} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / n as f64), op))
    }

    /// Picks `x[i, idx[i]]` for every row.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::dim("gather_cols index length"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= xv.cols() {
                return Err(Error::dim(format!("column {c} of {}", xv.cols())));
            }
            out.push(xv.row(r)[c]);
        }
        Ok(self.push(Tensor::vector(out), Op::GatherCols(x, idx.to_vec())))
    }

    /// Mean Huber loss of `x − target`.
    pub fn huber(&mut self, x: Var, target: &Tensor, delta: f64) -> Result<Var> {
        let xv = self.value(x);
        check_same(xv, target, "huber")?;
        let n = xv.len().max(1) as f64;
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d <= delta {
                    0.5 * d * d
                } else {
                    delta * (d - 0.5 * delta)
                }
            })
            .sum();
        let op = Op::Huber {
            x,
            target: target.clone(),
            delta,
        };
        Ok(self.push(Tensor::scalar(s / n), op))
    }

    /// Training-mode batch normalisation over rows. Returns the output and
    /// the batch mean and biased variance per column.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if n < 2 || xv.is_vector() {
            return Err(Error::dim("batch_norm needs at least two rows"));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("batch_norm affine width"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            xhat,
            inv_std,
        };
        let y = self.push(out, op);
        // beta's gradient is the column sum of the upstream gradient, which
        // is recovered in backward by linking it as a bias on `y`.
        let y = self.add_bias_passthrough(y, beta);
        Ok((y, mean, var))
    }

    // Identity in value (beta was already applied); routes the column-sum
    // gradient to `beta`.
    fn add_bias_passthrough(&mut self, y: Var, beta: Var) -> Var {
        let t = self.value(y).clone();
        self.push(t, Op::AddBias(y, beta))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            // Leaf gradients stay in place for the caller; interior ones are
            // consumed as they are propagated.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::AddBias(x, b) => {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::vector(db));
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(a, c) => {
                    let mut t = g;
                    t.data_mut().iter_mut().for_each(|v| *v *= c);
                    accumulate(&mut grads, *a, t);
                }
                Op::Relu(x) => {
                    let mut t = g;
                    for (d, v) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, t);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut t = g;
                    for (d, v) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads, *x, t);
                }
                Op::ConcatCols(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (p, q) = (av.cols(), bv.cols());
                    let mut da = Vec::with_capacity(av.len());
                    let mut db = Vec::with_capacity(bv.len());
                    for row in g.data().chunks(p + q) {
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut dx.data_mut()[src * d..(src + 1) * d];
                        for (o, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SegmentMean { x, seg, counts } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        let src = &g.data()[s * d..(s + 1) * d];
                        for (o, v) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SegmentSoftmax { x, seg, n_seg } => {
                    let y = node.value.data();
                    let mut dot = vec![0.0; *n_seg];
                    for ((&s, gy), yy) in seg.iter().zip(g.data()).zip(y) {
                        dot[s] += gy * yy;
                    }
                    let dx: Vec<f64> = seg
                        .iter()
                        .zip(g.data())
                        .zip(y)
                        .map(|((&s, gy), yy)| yy * (gy - dot[s]))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::vector(dx));
                }
                Op::SegmentWeightedSum { x, w, seg } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dw = vec![0.0; wv.len()];
                    for (r, &s) in seg.iter().enumerate() {
                        let gs = &g.data()[s * d..(s + 1) * d];
                        let wr = wv.data()[r];
                        let xr = xv.row(r);
                        let mut acc = 0.0;
                        for ((o, gv), xx) in dx.data_mut()[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(gs)
                            .zip(xr)
                        {
                            *o = wr * gv;
                            acc += gv * xx;
                        }
                        dw[r] = acc;
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, Tensor::vector(dw));
                }
                Op::RowDot(x, v) => {
                    let (xv, vv) = (self.value(*x), self.value(*v));
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dv = vec![0.0; d];
                    for (r, gr) in g.data().iter().enumerate() {
                        let xr = xv.row(r);
                        for j in 0..d {
                            dx.data_mut()[r * d + j] = gr * vv.data()[j];
                            dv[j] += gr * xr[j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *v, Tensor::vector(dv));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = g;
                    for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, yy) in dr.iter_mut().zip(yr) {
                            *d = yy * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let s = g.item();
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), s));
                }
                Op::GaussianNll(p, target) => {
                    let s = g.item();
                    let pv = self.value(*p);
                    let d: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| s * (a - b))
                        .collect();
                    accumulate(&mut grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g.item() / labels.len() as f64;
                    let k = probs.cols();
                    let mut d = probs.clone();
                    for (row, &y) in d.data_mut().chunks_mut(k).zip(labels) {
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::GatherCols(x, idx) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, (&col, gv)) in idx.iter().zip(g.data()).enumerate() {
                        dx.data_mut()[r * c + col] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Huber { x, target, delta } => {
                    let xv = self.value(*x);
                    let s = g.item() / xv.len().max(1) as f64;
                    let d: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| s * (a - b).clamp(-delta, *delta))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (n, d) = (xhat.rows(), xhat.cols());
                    let mut dgamma = vec![0.0; d];
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            dgamma[j] += gr[j] * xr[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * xr[j];
                        }
                    }
                    let nf = n as f64;
                    let mut dx = Tensor::zeros(xhat.shape());
                    for ((dr, gr), xr) in dx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(xhat.data().chunks(d))
                    {
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            dr[j] = inv_std[j] / nf
                                * (nf * dxh - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::vector(dgamma));
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
