//! Define-by-run computation record.
//!
//! Every forward operation appends a node holding its value and the ids of its
//! inputs. Nodes are only ever appended, so inputs always precede the node that
//! consumes them and a single reverse sweep is a valid topological replay.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative expressed through the input `x` and output `y = f(x)`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Lerp { from: NodeId, to: NodeId, weight: NodeId },
    Unary(NodeId, Activation),
    SoftmaxRows(NodeId),
    Rbf { features: NodeId, bandwidth: NodeId },
    SparsifyRows { input: NodeId, kept: Vec<bool>, fallback: Vec<bool> },
    SumRows(NodeId),
    MeanRows(NodeId),
    MaxRows { input: NodeId, argmax: Vec<usize> },
    SumAll(NodeId),
    BceWithLogit { logit: NodeId, target: f64 },
    PoissonLogRate { log_rate: NodeId, count: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The computation record of one forward pass. Borrowed leaves let parameter
/// snapshots enter the record without copying.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn scalar_check(t: &Tensor, op: &'static str) -> Result<()> {
    if t.shape() != (1, 1) {
        return Err(DmpsError::Dimension {
            op,
            left: t.shape(),
            right: (1, 1),
        });
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Untracked input (data, fixed matrices).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Tracked leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn variable_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x + 1·b` with `b` a `1 x cols` row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(DmpsError::Dimension {
                op: "add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for (o, bj) in v.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// `from + w·(to − from)` with a `1 x 1` weight `w`; `(1−w)·from + w·to`.
    pub fn lerp(&mut self, from: NodeId, to: NodeId, weight: NodeId) -> Result<NodeId> {
        scalar_check(self.value(weight), "lerp weight")?;
        let w = self.value(weight).item();
        let v = self
            .value(from)
            .zip_map(self.value(to), "lerp", |a, b| (1.0 - w) * a + w * b)?;
        let rg = self.rg(from) || self.rg(to) || self.rg(weight);
        Ok(self.push(v, Op::Lerp { from, to, weight }, rg))
    }

    pub fn unary(&mut self, x: NodeId, f: Activation) -> NodeId {
        if f == Activation::Identity {
            return x;
        }
        let v = self.value(x).map(|z| f.apply(z));
        let rg = self.rg(x);
        self.push(v, Op::Unary(x, f), rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    /// RBF kernel matrix `K_ij = exp(−‖φ_i − φ_j‖² / (2σ²))` of the rows of
    /// `features`, with `bandwidth` a `1 x 1` node holding σ.
    pub fn rbf_kernel(&mut self, features: NodeId, bandwidth: NodeId) -> Result<NodeId> {
        scalar_check(self.value(bandwidth), "rbf bandwidth")?;
        let sigma = self.value(bandwidth).item();
        if !(sigma > 0.0) {
            return Err(DmpsError::contract(format!("rbf bandwidth must be positive, got {sigma}")));
        }
        let v = rbf_from_features(self.value(features), sigma);
        let rg = self.rg(features) || self.rg(bandwidth);
        Ok(self.push(v, Op::Rbf { features, bandwidth }, rg))
    }

    /// Zeroes entries below `delta` and renormalizes each row; a row with no
    /// surviving entry collapses to its self-weight.
    pub fn sparsify_rows(&mut self, x: NodeId, delta: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != xv.cols() {
            return Err(DmpsError::Dimension {
                op: "sparsify_rows",
                left: xv.shape(),
                right: (xv.rows(), xv.rows()),
            });
        }
        let (v, kept, fallback) = sparsify_with_mask(xv, delta);
        let rg = self.rg(x);
        Ok(self.push(v, Op::SparsifyRows { input: x, kept, fallback }, rg))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(DmpsError::EmptySet);
        }
        let v = xv.sum_rows();
        let rg = self.rg(x);
        Ok(self.push(v, Op::SumRows(x), rg))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(DmpsError::EmptySet);
        }
        let v = xv.sum_rows().scale(1.0 / xv.rows() as f64);
        let rg = self.rg(x);
        Ok(self.push(v, Op::MeanRows(x), rg))
    }

    /// Column-wise max; ties resolve to the first row.
    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(DmpsError::EmptySet);
        }
        let mut argmax = vec![0usize; xv.cols()];
        let mut v = Tensor::from_vec(1, xv.cols(), xv.row(0).to_vec())?;
        for i in 1..xv.rows() {
            for (j, &z) in xv.row(i).iter().enumerate() {
                if z > v[(0, j)] {
                    v[(0, j)] = z;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::MaxRows { input: x, argmax }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target ∈ {0, 1}`,
    /// evaluated as `softplus(z) − y·z`.
    pub fn bce_with_logit(&mut self, logit: NodeId, target: f64) -> Result<NodeId> {
        scalar_check(self.value(logit), "bce_with_logit")?;
        let z = self.value(logit).item();
        let v = Tensor::scalar(softplus(z) - target * z);
        let rg = self.rg(logit);
        Ok(self.push(v, Op::BceWithLogit { logit, target }, rg))
    }

    /// Poisson negative log-likelihood of `count` under rate `λ = exp(η)`:
    /// `exp(η) − x·η + ln x!`.
    pub fn poisson_nll_log_rate(&mut self, log_rate: NodeId, count: u64) -> Result<NodeId> {
        scalar_check(self.value(log_rate), "poisson_nll_log_rate")?;
        let eta = self.value(log_rate).item();
        let x = count as f64;
        let v = Tensor::scalar(eta.exp() - x * eta + ln_factorial(count));
        let rg = self.rg(log_rate);
        Ok(self.push(v, Op::PoissonLogRate { log_rate, count: x }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that requires one and is reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DmpsError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.rg(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.sum_rows())?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::Lerp { from, to, weight } => {
                let w = self.value(*weight).item();
                if self.rg(*from) {
                    self.accumulate(grads, *from, g.scale(1.0 - w))?;
                }
                if self.rg(*to) {
                    self.accumulate(grads, *to, g.scale(w))?;
                }
                if self.rg(*weight) {
                    let (f, t) = (self.value(*from).data(), self.value(*to).data());
                    let gw: f64 = g
                        .data()
                        .iter()
                        .zip(f.iter().zip(t))
                        .map(|(gi, (fi, ti))| gi * (ti - fi))
                        .sum();
                    self.accumulate(grads, *weight, Tensor::scalar(gw))?;
                }
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for ((gi, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(out.data()) {
                    *gi *= f.derivative(xi, yi);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gi, &yi) in gx.row_mut(i).iter_mut().zip(y) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Rbf { features, bandwidth } => {
                let phi = self.value(*features);
                let sigma = self.value(*bandwidth).item();
                let inv_s2 = 1.0 / (sigma * sigma);
                let n = phi.rows();
                if self.rg(*features) {
                    let mut gphi = Tensor::zeros(n, phi.cols());
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let c = -(g[(i, j)] + g[(j, i)]) * out[(i, j)] * inv_s2;
                            if c == 0.0 {
                                continue;
                            }
                            let (pi, pj) = (phi.row(i), phi.row(j));
                            for (k, (a, b)) in pi.iter().zip(pj).enumerate() {
                                gphi[(i, k)] += c * (a - b);
                            }
                        }
                    }
                    self.accumulate(grads, *features, gphi)?;
                }
                if self.rg(*bandwidth) {
                    // dK/dσ = K · d² / σ³ with d² = −2σ² ln K.
                    let mut gs = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let d2 = sq_dist(phi.row(i), phi.row(j));
                            gs += g[(i, j)] * out[(i, j)] * d2 * inv_s2 / sigma;
                        }
                    }
                    self.accumulate(grads, *bandwidth, Tensor::scalar(gs))?;
                }
            }
            Op::SparsifyRows { input, kept, fallback } => {
                let xv = self.value(*input);
                let n = xv.rows();
                let mut gx = Tensor::zeros(n, n);
                for i in 0..n {
                    if fallback[i] {
                        continue;
                    }
                    let row_mask = &kept[i * n..(i + 1) * n];
                    let s: f64 = xv
                        .row(i)
                        .iter()
                        .zip(row_mask)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| v)
                        .sum();
                    let dot: f64 = g.row(i).iter().zip(out.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if row_mask[j] {
                            gx[(i, j)] = (g[(i, j)] - dot) / s;
                        }
                    }
                }
                self.accumulate(grads, *input, gx)?;
            }
            Op::SumRows(x) => {
                let rows = self.value(*x).rows();
                let gx = Tensor::from_fn(rows, g.cols(), |_, j| g[(0, j)]);
                self.accumulate(grads, *x, gx)?;
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let inv = 1.0 / rows as f64;
                let gx = Tensor::from_fn(rows, g.cols(), |_, j| g[(0, j)] * inv);
                self.accumulate(grads, *x, gx)?;
            }
            Op::MaxRows { input, argmax } => {
                let xv = self.value(*input);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (j, &i) in argmax.iter().enumerate() {
                    gx[(i, j)] = g[(0, j)];
                }
                self.accumulate(grads, *input, gx)?;
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item()))?;
            }
            Op::BceWithLogit { logit, target } => {
                let z = self.value(*logit).item();
                self.accumulate(grads, *logit, Tensor::scalar(g.item() * (sigmoid(z) - target)))?;
            }
            Op::PoissonLogRate { log_rate, count } => {
                let eta = self.value(*log_rate).item();
                self.accumulate(grads, *log_rate, Tensor::scalar(g.item() * (eta.exp() - count)))?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn rbf_from_features(phi: &Tensor, sigma: f64) -> Tensor {
    let n = phi.rows();
    let denom = 2.0 * sigma * sigma;
    let mut k = Tensor::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = (-sq_dist(phi.row(i), phi.row(j)) / denom).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub(crate) fn sparsify_with_mask(w: &Tensor, delta: f64) -> (Tensor, Vec<bool>, Vec<bool>) {
    let n = w.rows();
    let mut out = Tensor::zeros(n, n);
    let mut kept = vec![false; n * n];
    let mut fallback = vec![false; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            if w[(i, j)] >= delta {
                kept[i * n + j] = true;
                s += w[(i, j)];
            }
        }
        if s > 0.0 {
            for j in 0..n {
                if kept[i * n + j] {
                    out[(i, j)] = w[(i, j)] / s;
                }
            }
        } else {
            for k in &mut kept[i * n..(i + 1) * n] {
                *k = false;
            }
            fallback[i] = true;
            out[(i, i)] = 1.0;
        }
    }
    (out, kept, fallback)
}

/// `ln x!` by direct summation for small arguments and Stirling's series
/// beyond.
pub fn ln_factorial(x: u64) -> f64 {
    if x < 64 {
        (2..=x).map(|k| (k as f64).ln()).sum()
    } else {
        let n = x as f64;
        n * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI * n).ln() + 1.0 / (12.0 * n)
            - 1.0 / (360.0 * n.powi(3))
    }
}
