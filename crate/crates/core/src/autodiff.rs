//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records every operation in execution order, so the node list
//! is already topologically sorted; [`Tape::backward`] walks it once in
//! reverse. Each forward result is checked for NaN/Inf and the offending op
//! is reported as an error instead of poisoning later values.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, NormStats};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::scan;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Act(Var, Activation),
    AddRowVector(Var, Var),
    AddColVector(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    MeanCols(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    DwConv3x3(Var, Var),
    Conv3x3(Var, Var),
    AvgPool2(Var),
    SelectiveScan { inputs: [Var; 6], states: Vec<T> },
    MaskedBce { logits: Var, targets: Vec<T>, mask: Vec<bool>, weight: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Single-threaded operation recorder. One tape per worker.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    frozen: Vec<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: IndexMap::new(), frozen: Vec::new() }
    }

    /// Parameters whose name starts with `prefix` enter as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.raw_push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf for a named parameter; repeated lookups return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.leaf(value, trainable)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters recorded so far, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn raw_push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.raw_push(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", y, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let y = self.value(a).map(|x| x * s);
        self.push("scale", y, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let y = self.value(a).map(|x| x + s);
        self.push("add_scalar", y, Op::AddScalar(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let y = ops::activation(self.value(a), kind)?;
        self.push(kind.name(), y, Op::Act(a, kind), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    /// `x + v` with `v` added to every row; `v.len()` must equal x's last extent.
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let y = ops::add_row_vector(self.value(x), self.value(v))?;
        self.push("add_row_vector", y, Op::AddRowVector(x, v), &[x, v])
    }

    /// `x + v` with `v[i]` added to the whole slab `x[i, ..]`.
    pub fn add_col_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let y = ops::add_col_vector(self.value(x), self.value(v))?;
        self.push("add_col_vector", y, Op::AddColVector(x, v), &[x, v])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push("reshape", y, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose(self.value(x))?;
        self.push("transpose", y, Op::Transpose(x), &[x])
    }

    /// `y.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = ops::gather(self.value(x), &index, shape)?;
        self.push("gather", y, Op::Gather(x, index), &[x])
    }

    /// Flat concatenation of all inputs, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: impl Into<Vec<usize>>) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let y = Tensor::new(shape, data)?;
        self.push("concat", y, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum(x), &[x])
    }

    /// Mean over the first axis of a matrix: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::mean_rows(self.value(x))?;
        self.push("mean_rows", y, Op::MeanRows(x), &[x])
    }

    /// Mean over the last axis of a matrix: `[m×n] -> [m]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let y = ops::mean_cols(self.value(x))?;
        self.push("mean_cols", y, Op::MeanCols(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x))?;
        self.push("softmax_rows", y, Op::SoftmaxRows(x), &[x])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, stats) = ops::layernorm_with_stats(self.value(x), self.value(gamma), self.value(beta), T::of(ops::LAYERNORM_EPS))?;
        self.push("layernorm", y, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn dwconv3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = ops::dwconv3x3(self.value(x), self.value(k))?;
        self.push("dwconv3x3", y, Op::DwConv3x3(x, k), &[x, k])
    }

    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::conv3x3(self.value(x), self.value(w))?;
        self.push("conv3x3", y, Op::Conv3x3(x, w), &[x, w])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.value(x))?;
        self.push("avg_pool2", y, Op::AvgPool2(x), &[x])
    }

    /// Fused selective scan. Shapes: `u, delta: [L×C]`, `a: [C×N]` (negative),
    /// `b, c: [L×N]`, `d: [C]`; returns `y: [L×C]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (y, states) = scan::scan_forward(self.value(u), self.value(delta), self.value(a), self.value(b), self.value(c), self.value(d))?;
        let inputs = [u, delta, a, b, c, d];
        self.push("selective_scan", y, Op::SelectiveScan { inputs, states }, &inputs)
    }

    /// Class-weighted binary cross-entropy on logits, averaged over unmasked
    /// entries. Masked entries are never read.
    pub fn masked_bce(&mut self, logits: Var, targets: Vec<T>, mask: Vec<bool>, weight: T) -> Result<Var> {
        let p = self.value(logits);
        if targets.len() != p.len() || mask.len() != p.len() {
            return Err(Error::shape("masked_bce", p.len(), format!("{}/{}", targets.len(), mask.len())));
        }
        let loss = masked_bce_loss(p.data(), &targets, &mask, weight);
        self.push("masked_bce", Tensor::scalar(loss), Op::MaskedBce { logits, targets, mask, weight }, &[logits])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // Trainable leaves that the loss never reached get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![T::zero(); node.value.len()]));
            } else if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every trainable parameter recorded via [`Tape::param`].
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, &v)| self.nodes[v.0].needs_grad)
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = ops::dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.wants(*b) {
                    // weights reused across recurrent steps accumulate in place
                    let gb = grads[b.0].get_or_insert_with(|| Tensor::from_parts(vec![k, n], vec![T::zero(); k * n]));
                    let gb = gb.data_mut();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let data = x.data().iter().zip(node.value.data()).zip(gd).map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::AddRowVector(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*v) {
                    let n = self.value(*v).len();
                    let mut gv = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (o, &r) in gv.iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                    self.accumulate(grads, *v, Tensor::from_parts(self.shape(*v).to_vec(), gv));
                }
            }
            Op::AddColVector(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*v) {
                    let m = self.value(*v).len();
                    let gv = gd.chunks(gd.len() / m).map(|slab| slab.iter().fold(T::zero(), |s, &r| s + r)).collect();
                    self.accumulate(grads, *v, Tensor::from_parts(self.shape(*v).to_vec(), gv));
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x).to_vec())?);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, ops::transpose(g)?),
            Op::Gather(x, index) => {
                let xs = self.value(*x);
                let mut gx = vec![T::zero(); xs.len()];
                for (&i, &gv) in index.iter().zip(gd) {
                    gx[i] += gv;
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.shape().to_vec(), gx));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let part = gd[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), part));
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                let xs = self.value(*x);
                self.accumulate(grads, *x, Tensor::from_parts(xs.shape().to_vec(), vec![gv; xs.len()]));
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2()?;
                let inv = T::one() / T::of(m as f64);
                let data = (0..m * n).map(|i| gd[i % n] * inv).collect();
                self.accumulate(grads, *x, Tensor::from_parts(vec![m, n], data));
            }
            Op::MeanCols(x) => {
                let (m, n) = self.value(*x).dims2()?;
                let inv = T::one() / T::of(n as f64);
                let data = (0..m * n).map(|i| gd[i / n] * inv).collect();
                self.accumulate(grads, *x, Tensor::from_parts(vec![m, n], data));
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot = y[r.clone()].iter().zip(&gd[r.clone()]).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in r {
                        gx[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![m, n], gx));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xs = self.value(*x);
                let gam = self.value(*gamma).data();
                let c = gam.len();
                let inv_c = T::one() / T::of(c as f64);
                let mut gx = vec![T::zero(); xs.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (r, row) in xs.data().chunks(c).enumerate() {
                    let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
                    let grow = &gd[r * c..(r + 1) * c];
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gam[j];
                        sum_d += dxhat;
                        sum_dx += dxhat * xhat;
                        gg[j] += grow[j] * xhat;
                        gb[j] += grow[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gam[j];
                        gx[r * c + j] = rstd * (dxhat - sum_d * inv_c - xhat * sum_dx * inv_c);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.shape().to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], gg));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], gb));
            }
            Op::DwConv3x3(x, k) => {
                let (xs, ks) = (self.value(*x), self.value(*k));
                let (c, h, w) = xs.dims3()?;
                let hw = h * w;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); xs.len()];
                    for ch in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = ks.data()[ch * 9 + ky * 3 + kx];
                                scatter_tap(&gd[ch * hw..(ch + 1) * hw], &mut gx[ch * hw..(ch + 1) * hw], h, w, ky, kx, wv);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xs.shape().to_vec(), gx));
                }
                if self.wants(*k) {
                    let mut gk = vec![T::zero(); c * 9];
                    for ch in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                gk[ch * 9 + ky * 3 + kx] =
                                    tap_correlation(&gd[ch * hw..(ch + 1) * hw], &xs.data()[ch * hw..(ch + 1) * hw], h, w, ky, kx);
                            }
                        }
                    }
                    self.accumulate(grads, *k, Tensor::from_parts(vec![c, 3, 3], gk));
                }
            }
            Op::Conv3x3(x, wt) => {
                let (xs, ws) = (self.value(*x), self.value(*wt));
                let (cin, h, w) = xs.dims3()?;
                let cout = ws.shape()[0];
                let hw = h * w;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); xs.len()];
                    for o in 0..cout {
                        let go = &gd[o * hw..(o + 1) * hw];
                        for i in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = ws.data()[((o * cin + i) * 3 + ky) * 3 + kx];
                                    scatter_tap(go, &mut gx[i * hw..(i + 1) * hw], h, w, ky, kx, wv);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xs.shape().to_vec(), gx));
                }
                if self.wants(*wt) {
                    let mut gw = vec![T::zero(); ws.len()];
                    for o in 0..cout {
                        let go = &gd[o * hw..(o + 1) * hw];
                        for i in 0..cin {
                            let plane = &xs.data()[i * hw..(i + 1) * hw];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    gw[((o * cin + i) * 3 + ky) * 3 + kx] = tap_correlation(go, plane, h, w, ky, kx);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *wt, Tensor::from_parts(ws.shape().to_vec(), gw));
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gd[(ch * oh + i) * ow + j] * quarter;
                            let p = ch * h * w + 2 * i * w + 2 * j;
                            gx[p] = gv;
                            gx[p + 1] = gv;
                            gx[p + w] = gv;
                            gx[p + w + 1] = gv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![c, h, w], gx));
            }
            Op::SelectiveScan { inputs, states } => {
                let values: [&Tensor<T>; 6] = inputs.map(|v| self.value(v));
                let out = scan::scan_backward(values, states, g)?;
                for (&v, gv) in inputs.iter().zip(out) {
                    self.accumulate(grads, v, gv);
                }
            }
            Op::MaskedBce { logits, targets, mask, weight } => {
                let p = self.value(*logits);
                let count = mask.iter().filter(|&&m| m).count();
                let scale = if count == 0 { T::zero() } else { gd[0] * *weight / T::of(count as f64) };
                let data =
                    (0..p.len()).map(|k| if mask[k] { (ops::sigmoid(p.data()[k]) - targets[k]) * scale } else { T::zero() }).collect();
                self.accumulate(grads, *logits, Tensor::from_parts(p.shape().to_vec(), data));
            }
        }
        Ok(())
    }
}

/// Numerically stable `-(y ln σ(p) + (1-y) ln(1-σ(p)))`.
#[inline]
/// `weight · mean_{k: mask[k]} bce(p[k], y[k])`; zero when nothing is
/// unmasked. Masked entries are never read.
pub fn masked_bce_loss<T: Scalar>(logits: &[T], targets: &[T], mask: &[bool], weight: T) -> T {
    let mut count = 0usize;
    let mut total = T::zero();
    for k in 0..logits.len() {
        if mask[k] {
            total += bce_with_logits(logits[k], targets[k]);
            count += 1;
        }
    }
    if count == 0 {
        T::zero()
    } else {
        weight * total / T::of(count as f64)
    }
}

pub fn bce_with_logits<T: Scalar>(p: T, y: T) -> T {
    p.max(T::zero()) - p * y + (-p.abs()).exp().ln_1p()
}

/// Adjoint of the forward tap: `dst[y + ky - 1, x + kx - 1] += wv * g[y, x]`.
#[inline]
fn scatter_tap<T: Scalar>(g: &[T], dst: &mut [T], h: usize, w: usize, ky: usize, kx: usize, wv: T) {
    let (y0, y1) = ops::valid_range(h, ky);
    let (x0, x1) = ops::valid_range(w, kx);
    for y in y0..y1 {
        let sy = y + ky - 1;
        for x in x0..x1 {
            dst[sy * w + x + kx - 1] += wv * g[y * w + x];
        }
    }
}

/// `Σ g[y, x] * src[y + ky - 1, x + kx - 1]` over the valid region.
#[inline]
fn tap_correlation<T: Scalar>(g: &[T], src: &[T], h: usize, w: usize, ky: usize, kx: usize) -> T {
    let (y0, y1) = ops::valid_range(h, ky);
    let (x0, x1) = ops::valid_range(w, kx);
    let mut s = T::zero();
    for y in y0..y1 {
        let sy = y + ky - 1;
        for x in x0..x1 {
            s += g[y * w + x] * src[sy * w + x + kx - 1];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![2, 3, 4]).unwrap(), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f64, 2.0, 3.0]).unwrap(), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![2]).unwrap(), true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(vec![2]).unwrap(), true).unwrap();
        let y = tape.leaf(Tensor::<f64>::ones(vec![3]).unwrap(), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![800.0f64]).unwrap(), true).unwrap();
        assert!(matches!(tape.activation(x, Activation::Exp), Err(Error::NonFinite { op: "exp" })));
        assert!(tape.leaf(Tensor::from_vec(vec![f64::NAN]).unwrap(), true).is_err());
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let a = tape.leaf(random(&[3, 4], &mut rng), true).unwrap();
            let b = tape.leaf(random(&[4, 2], &mut rng), true).unwrap();
            let m = tape.matmul(a, b).unwrap();
            let t = tape.tanh(m).unwrap();
            let s = tape.sum(t).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(s).clone(), g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

    fn check(shapes: &[&[usize]], seed: u64, build: Build) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = check_gradients(&inputs, &GradCheck::default(), |tape, vars| {
            let y = build(tape, vars)?;
            // random projection so every output element matters
            let shape = tape.shape(y).to_vec();
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let proj = tape.constant(Tensor::from_fn(shape, |_| prng.gen_range(-1.0..1.0))?)?;
            let p = tape.mul(y, proj)?;
            tape.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn elementwise_ops_pass_finite_differences() {
        check(&[&[3, 4], &[3, 4]], 1, |t, v| t.add(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], 2, |t, v| t.sub(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], 3, |t, v| t.mul(v[0], v[1]));
        check(&[&[5]], 4, |t, v| t.scale(v[0], -2.5));
        check(&[&[5]], 5, |t, v| t.add_scalar(v[0], 0.75));
        for (i, kind) in [Activation::Silu, Activation::Sigmoid, Activation::Tanh, Activation::Relu, Activation::Softplus, Activation::Exp]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let x = random(&[4, 3], &mut rng);
            let report = check_gradients(&[x], &GradCheck::default(), |tape, vars| {
                let y = tape.activation(vars[0], kind)?;
                tape.sum(y)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn structural_ops_pass_finite_differences() {
        check(&[&[3, 4], &[4, 2]], 10, |t, v| t.matmul(v[0], v[1]));
        check(&[&[3, 4], &[4]], 11, |t, v| t.add_row_vector(v[0], v[1]));
        check(&[&[3, 2, 2], &[3]], 12, |t, v| t.add_col_vector(v[0], v[1]));
        check(&[&[3, 4]], 13, |t, v| t.transpose(v[0]));
        check(&[&[3, 4]], 14, |t, v| t.reshape(v[0], vec![2, 6]));
        check(&[&[3, 4]], 15, |t, v| t.gather(v[0], Arc::from(vec![0usize, 5, 5, 11, 2]), vec![5]));
        check(&[&[3], &[2, 2]], 16, |t, v| t.concat(&[v[0], v[1]], vec![7]));
        check(&[&[3, 4]], 17, |t, v| t.mean_rows(v[0]));
        check(&[&[3, 4]], 18, |t, v| t.mean_cols(v[0]));
        check(&[&[3, 4]], 19, |t, v| t.softmax_rows(v[0]));
        check(&[&[3, 5], &[5], &[5]], 20, |t, v| t.layernorm(v[0], v[1], v[2]));
        check(&[&[2, 5, 5], &[2, 3, 3]], 21, |t, v| t.dwconv3x3(v[0], v[1]));
        check(&[&[2, 4, 6], &[3, 2, 3, 3]], 22, |t, v| t.conv3x3(v[0], v[1]));
        check(&[&[2, 4, 6]], 23, |t, v| t.avg_pool2(v[0]));
    }

    #[test]
    fn masked_bce_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let p = random(&[1, 5], &mut rng);
        let report = check_gradients(&[p], &GradCheck::default(), |tape, vars| {
            tape.masked_bce(vars[0], vec![1.0, 0.0, 1.0, 0.0, 0.0], vec![true, true, false, true, false], 1.7)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn masked_bce_saturated_correct_prediction_is_near_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(vec![30.0f64, -30.0]).unwrap()).unwrap();
        let l = tape.masked_bce(p, vec![1.0, 0.0], vec![true, true], 1.0).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-12);
    }
}
