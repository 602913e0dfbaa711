//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use super::kernels::{self, Dims4};
use super::tensor::Tensor;
use crate::error::AutodiffError;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with supplied running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    MaxPool2d(Var, Vec<usize>),
    MaxAxis(Var, Vec<usize>),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SigmoidBce { logits: Var, targets: Vec<f64> },
    SqDiffSum(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward/backward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument { op, msg: msg.into() }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<Dims4, AutodiffError> {
    match *shape {
        [b, c, h, w] => Ok(Dims4 { b, c, h, w }),
        _ => Err(invalid(op, format!("expected a 4-D tensor, got {shape:?}"))),
    }
}

fn matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize), AutodiffError> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(invalid(op, format!("expected a 2-D tensor, got {shape:?}"))),
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter or a probe).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Batch mean and biased variance recorded by a train-mode batch norm.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { batch_stats: Some((m, s)), .. } => Some((m, s)),
            _ => None,
        }
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backpropagated = false;
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect()).unwrap();
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `x[.., C] + bias[C]`, broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let c = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [c] {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = matrix("matmul", ta.shape())?;
        let (k2, n) = matrix("matmul", tb.shape())?;
        if k != k2 {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x @ w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [B, Ci, H, W]`,
    /// `w: [Co, Ci, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (tx, tw) = (self.val(x), self.val(w));
        let xd = dims4("conv2d", tx.shape())?;
        let wd = dims4("conv2d", tw.shape())?;
        if wd.c != xd.c || wd.h != 3 || wd.w != 3 {
            return Err(mismatch("conv2d", tx.shape(), tw.shape()));
        }
        let out = kernels::conv3x3_forward(tx.data(), xd, tw.data(), wd.b);
        let t = Tensor::new(vec![xd.b, wd.b, xd.h, xd.w], out)?;
        Ok(self.push(t, Op::Conv2d(x, w), &[x, w]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        self.push(t, Op::Relu(a), &[a])
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode,
    ) -> Result<Var, AutodiffError> {
        let tx = self.val(x);
        let shape = tx.shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("batch_norm", format!("expected at least 2-D input, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for p in [gamma, beta] {
            if self.val(p).shape() != [c] {
                return Err(mismatch("batch_norm", &shape, self.val(p).shape()));
            }
        }
        let m = (b * inner) as f64;
        let xs = tx.data();
        let at = |bi: usize, ci: usize, s: usize| (bi * c + ci) * inner + s;
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for k in 0..inner {
                            s += xs[at(bi, ci, k)];
                        }
                    }
                    mean[ci] = s / m;
                    let mut q = 0.0;
                    for bi in 0..b {
                        for k in 0..inner {
                            let d = xs[at(bi, ci, k)] - mean[ci];
                            q += d * d;
                        }
                    }
                    var[ci] = q / m;
                }
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", &shape, &[mean.len()]));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                for k in 0..inner {
                    let i = at(bi, ci, k);
                    xhat[i] = (xs[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        ))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.val(x);
        let xd = dims4("max_pool2d", tx.shape())?;
        if xd.h < 2 || xd.w < 2 {
            return Err(invalid("max_pool2d", format!("spatial size {}x{} below 2x2", xd.h, xd.w)));
        }
        let (out, arg) = kernels::maxpool2x2_forward(tx.data(), xd);
        let t = Tensor::new(vec![xd.b, xd.c, xd.h / 2, xd.w / 2], out)?;
        Ok(self.push(t, Op::MaxPool2d(x, arg), &[x]))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Maximum over `axis`, which is removed from the shape.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let tx = self.val(x);
        if axis >= tx.shape().len() || tx.shape()[axis] == 0 {
            return Err(invalid("max_over_axis", format!("axis {axis} invalid for {:?}", tx.shape())));
        }
        let (outer, len, inner) = Self::axis_split(tx.shape(), axis);
        let xs = tx.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MaxAxis(x, arg), &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let tx = self.val(x);
        if axis >= tx.shape().len() || tx.shape()[axis] == 0 {
            return Err(invalid("mean_over_axis", format!("axis {axis} invalid for {:?}", tx.shape())));
        }
        let (outer, len, inner) = Self::axis_split(tx.shape(), axis);
        let xs = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xs[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.ln()).collect()).unwrap();
        self.push(t, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.exp()).collect()).unwrap();
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.sqrt()).collect()).unwrap();
        self.push(t, Op::Sqrt(a), &[a])
    }

    /// Row-wise `-log softmax(logits)[target]`; output shape `[rows]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let tl = self.val(logits);
        let (r, c) = matrix("softmax_cross_entropy", tl.shape())?;
        if targets.len() != r {
            return Err(mismatch("softmax_cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(invalid("softmax_cross_entropy", format!("target {t} out of {c} classes")));
        }
        let mut probs = vec![0.0; r * c];
        let mut out = Vec::with_capacity(r);
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &tl.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            out.push(lse - row[tgt]);
        }
        let t = Tensor::new(vec![r], out)?;
        Ok(self.push(
            t,
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Softmax probabilities recorded by a `softmax_cross_entropy` node.
    pub fn softmax_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against
    /// `targets` in `[0, 1]`.
    pub fn sigmoid_binary_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var, AutodiffError> {
        let tl = self.val(logits);
        if targets.len() != tl.len() {
            return Err(mismatch("sigmoid_binary_cross_entropy", tl.shape(), &[targets.len()]));
        }
        let out = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| log1p_exp(z) - z * y)
            .collect();
        let t = Tensor::new(tl.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SigmoidBce { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Pairwise `sum_d (a[q, d] - b[p, d])^2` for `a: [Q, D]`, `b: [P, D]`,
    /// giving `[Q, P]`.
    pub fn squared_difference_sum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (q, d) = matrix("squared_difference_sum", ta.shape())?;
        let (p, d2) = matrix("squared_difference_sum", tb.shape())?;
        if d != d2 {
            return Err(mismatch("squared_difference_sum", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(q * p);
        for i in 0..q {
            let ra = &ta.data()[i * d..(i + 1) * d];
            for j in 0..p {
                let rb = &tb.data()[j * d..(j + 1) * d];
                out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let t = Tensor::new(vec![q, p], out)?;
        Ok(self.push(t, Op::SqDiffSum(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.val(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Rows `start..end` of a tensor (first axis).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let tx = self.val(x);
        let rows = *tx.shape().first().unwrap_or(&0);
        if start > end || end > rows {
            return Err(invalid("slice_rows", format!("{start}..{end} out of {rows} rows")));
        }
        let stride: usize = tx.shape()[1..].iter().product();
        let data = tx.data()[start * stride..end * stride].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenate along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let tail = self.val(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.val(p);
            if tp.shape()[1..] != tail[..] {
                return Err(mismatch("concat_rows", self.val(*first).shape(), tp.shape()));
            }
            rows += tp.shape()[0];
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Accumulate d(output)/d(node) for every node that depends on an input
    /// created with [`Graph::input`].
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        let shape = self.val(output).shape().to_vec();
        if !(shape.is_empty() || shape == [1]) {
            return Err(AutodiffError::NotScalar(shape));
        }
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if !self.nodes[output.0].requires_grad {
            return Err(AutodiffError::Detached);
        }
        self.backpropagated = true;
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so parents' grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                if let Some(ga) = self.acc(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gb) = self.acc(*b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = matrix("matmul", self.val(*a).shape()).unwrap();
                let n = self.val(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G @ B^T
                    let bt = transpose(self.val(*b).data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    let ga = self.acc(*a).unwrap();
                    ga.iter_mut().zip(da).for_each(|(x, y)| *x += y);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ G
                    let at = transpose(self.val(*a).data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    let gb = self.acc(*b).unwrap();
                    gb.iter_mut().zip(db).for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv2d(x, w) => {
                let xd = dims4("conv2d", self.val(*x).shape()).unwrap();
                let cout = self.val(*w).shape()[0];
                let (nx, nw) = (self.nodes[x.0].requires_grad, self.nodes[w.0].requires_grad);
                let (dx, dw) = kernels::conv3x3_backward(
                    self.val(*x).data(),
                    xd,
                    self.val(*w).data(),
                    cout,
                    g,
                    nx,
                    nw,
                );
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(dx).for_each(|(a, y)| *a += y);
                }
                if let Some(gw) = self.acc(*w) {
                    gw.iter_mut().zip(dw).for_each(|(a, y)| *a += y);
                }
            }
            Op::Relu(a) => {
                let va = self.val(*a).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.val(*x).shape().to_vec();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let at = |bi: usize, ci: usize, s: usize| (bi * c + ci) * inner + s;
                let gam = self.val(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for s in 0..inner {
                            let idx = at(bi, ci, s);
                            dgamma[ci] += g[idx] * xhat[idx];
                            dbeta[ci] += g[idx];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let m = (b * inner) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for ci in 0..c {
                        if batch_stats.is_some() {
                            // Batch statistics depend on x.
                            let (sum_dxhat, sum_dxhat_xhat) = (gam[ci] * dbeta[ci], gam[ci] * dgamma[ci]);
                            for bi in 0..b {
                                for s in 0..inner {
                                    let idx = at(bi, ci, s);
                                    let dxhat = g[idx] * gam[ci];
                                    dx[idx] = inv_std[ci] / m
                                        * (m * dxhat - sum_dxhat - xhat[idx] * sum_dxhat_xhat);
                                }
                            }
                        } else {
                            for bi in 0..b {
                                for s in 0..inner {
                                    let idx = at(bi, ci, s);
                                    dx[idx] = g[idx] * gam[ci] * inv_std[ci];
                                }
                            }
                        }
                    }
                    let gx = self.acc(*x).unwrap();
                    gx.iter_mut().zip(dx).for_each(|(a, y)| *a += y);
                }
                if let Some(gg) = self.acc(*gamma) {
                    gg.iter_mut().zip(&dgamma).for_each(|(a, y)| *a += y);
                }
                if let Some(gb) = self.acc(*beta) {
                    gb.iter_mut().zip(&dbeta).for_each(|(a, y)| *a += y);
                }
            }
            Op::MaxPool2d(x, arg) | Op::MaxAxis(x, arg) => {
                if let Some(gx) = self.acc(*x) {
                    for (k, &src) in arg.iter().enumerate() {
                        gx[src] += g[k];
                    }
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(gx) = self.acc(*x) {
                    let scale = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::Log(a) => {
                let va = self.val(*a).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] / va[k];
                    }
                }
            }
            Op::Exp(a) | Op::Sqrt(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let is_exp = matches!(op, Op::Exp(_));
                if let Some(ga) = self.acc(*a) {
                    for k in 0..g.len() {
                        ga[k] += if is_exp { g[k] * out[k] } else { g[k] / (2.0 * out[k]) };
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                if let Some(gl) = self.acc(*logits) {
                    let c = probs.len() / targets.len().max(1);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[r] * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.val(*logits).data().to_vec();
                if let Some(gl) = self.acc(*logits) {
                    for k in 0..g.len() {
                        gl[k] += g[k] * (sigmoid(z[k]) - targets[k]);
                    }
                }
            }
            Op::SqDiffSum(a, b) => {
                let (q, d) = matrix("squared_difference_sum", self.val(*a).shape()).unwrap();
                let p = self.val(*b).shape()[0];
                let va = self.val(*a).data().to_vec();
                let vb = self.val(*b).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for qi in 0..q {
                        for pj in 0..p {
                            let gv = 2.0 * g[qi * p + pj];
                            for k in 0..d {
                                ga[qi * d + k] += gv * (va[qi * d + k] - vb[pj * d + k]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for qi in 0..q {
                        for pj in 0..p {
                            let gv = 2.0 * g[qi * p + pj];
                            for k in 0..d {
                                gb[pj * d + k] -= gv * (va[qi * d + k] - vb[pj * d + k]);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.val(*a).len();
                let s = if matches!(op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceRows { x, start } => {
                let stride: usize = self.val(*x).shape()[1..].iter().product();
                let off = start * stride;
                if let Some(gx) = self.acc(*x) {
                    gx[off..off + g.len()].iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if let Some(gp) = self.acc(p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, y)| *a += y);
                    }
                    off += n;
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
