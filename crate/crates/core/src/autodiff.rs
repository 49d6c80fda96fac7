//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose parents already exist, so node order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Inputs are never mutated; gradients land in a separate [`Gradients`].

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// `b` has the same shape as `a`, or `b.numel() == a.cols()` (row broadcast).
    Add { a: Var, b: Var, broadcast: bool },
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: `d loss / d node` for every node that
/// requires a gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `var` into `param.grad`.
    pub fn accumulate_into(&self, var: Var, param: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => param.accumulate_grad(g),
            None => Ok(()),
        }
    }
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

    /// A differentiable input (parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input (data, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, mut value: Tensor, requires_grad: bool) -> Var {
        value.zero_grad();
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Elementwise sum; `b` may also be a bias row broadcast across rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if va.rank() == 2 && vb.numel() == va.cols() {
            true
        } else {
            return Err(Error::shape(format!("add {:?} and {:?}", va.shape(), vb.shape())));
        };
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if broadcast { vb.data()[i % cols] } else { vb.data()[i] })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b, broadcast }, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("mul {:?} and {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * factor);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, factor), out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| {
            let v = va.data()[i];
            if v > 0.0 || v.is_nan() { v } else { 0.0 }
        });
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), out, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| gelu(f64::from(va.data()[i])) as f32);
        let rg = self.needs(&[a]);
        self.push(Op::Gelu(a), out, rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = vec![0.0f32; va.numel()];
        for (src, dst) in va.data().chunks(cols).zip(data.chunks_mut(cols)) {
            let probs = softmax_row(src);
            dst.iter_mut().zip(&probs).for_each(|(d, &p)| *d = p as f32);
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Softmax(a), out, rg))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut data = vec![0.0f32; vx.numel()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for (src, dst) in vx.data().chunks(cols).zip(data.chunks_mut(cols)) {
            let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
            let var = src.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((f64::from(s) - mean) * inv) as f32;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::LayerNorm { x, inv_std }, out, rg))
    }

    /// Mean negative log-softmax of the true class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (batch, classes) = vl.dims2()?;
        if labels.len() != batch {
            return Err(Error::input(format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0f64;
        for (row, &y) in vl.data().chunks(classes).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max + row.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln();
            loss += lse - f64::from(row[y]);
            probs.extend(row.iter().map(|&v| (f64::from(v) - lse).exp()));
        }
        let out = Tensor::vector(vec![(loss / batch as f64) as f32])?;
        let rg = self.needs(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|&v| f64::from(v)).sum();
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), Tensor::filled(&[1], total as f32), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = va.data().iter().map(|&v| f64::from(v)).sum();
        let mean = total / va.numel() as f64;
        let rg = self.needs(&[a]);
        self.push(Op::Mean(a), Tensor::filled(&[1], mean as f32), rg)
    }

    /// Propagates `d loss / d node` back to every node that requires it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut send = |var: Var, delta: Vec<f32>| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.nodes[a.0].requires_grad {
                    send(*a, tensor::matmul_nt(up, vb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, tensor::matmul_tn(va.data(), up, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                send(*a, tensor::transpose(up, m, n));
            }
            Op::Reshape(a) => send(*a, up.to_vec()),
            Op::Add { a, b, broadcast } => {
                send(*a, up.to_vec());
                if *broadcast {
                    let cols = node.value.cols();
                    let mut acc = vec![0.0f64; cols];
                    for row in up.chunks(cols) {
                        acc.iter_mut().zip(row).for_each(|(s, &u)| *s += f64::from(u));
                    }
                    send(*b, acc.into_iter().map(|s| s as f32).collect());
                } else {
                    send(*b, up.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, up.iter().zip(vb).map(|(u, y)| u * y).collect());
                send(*b, up.iter().zip(va).map(|(u, x)| u * x).collect());
            }
            Op::Scale(a, f) => send(*a, up.iter().map(|u| u * f).collect()),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                send(*a, up.iter().zip(va).map(|(&u, &x)| if x > 0.0 { u } else { 0.0 }).collect());
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                send(
                    *a,
                    up.iter()
                        .zip(va)
                        .map(|(&u, &x)| (f64::from(u) * gelu_grad(f64::from(x))) as f32)
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, ur), dr) in y.chunks(cols).zip(up.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(ur).map(|(&p, &u)| f64::from(p) * f64::from(u)).sum();
                    for ((d, &p), &u) in dr.iter_mut().zip(yr).zip(ur) {
                        *d = (f64::from(p) * (f64::from(u) - dot)) as f32;
                    }
                }
                send(*a, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0f32; y.len()];
                let rows = y.chunks(cols).zip(up.chunks(cols)).zip(dx.chunks_mut(cols));
                for (((yr, ur), dr), &inv) in rows.zip(inv_std) {
                    let mean_u = ur.iter().map(|&u| f64::from(u)).sum::<f64>() / cols as f64;
                    let mean_uy = yr
                        .iter()
                        .zip(ur)
                        .map(|(&v, &u)| f64::from(v) * f64::from(u))
                        .sum::<f64>()
                        / cols as f64;
                    for ((d, &v), &u) in dr.iter_mut().zip(yr).zip(ur) {
                        *d = (inv * (f64::from(u) - mean_u - f64::from(v) * mean_uy)) as f32;
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).cols();
                let scale = f64::from(up[0]) / labels.len() as f64;
                let mut dx = Vec::with_capacity(probs.len());
                for (row, &y) in probs.chunks(classes).zip(labels) {
                    for (c, &p) in row.iter().enumerate() {
                        let target = if c == y { 1.0 } else { 0.0 };
                        dx.push(((p - target) * scale) as f32);
                    }
                }
                send(*logits, dx);
            }
            Op::Sum(a) => send(*a, vec![up[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![(f64::from(up[0]) / n as f64) as f32; n]);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_fn(&[3, 2], |i| i as f32));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_norm_grad_is_weight() {
        let mut tape = Tape::new();
        let data = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.3 - 0.7);
        let w = tape.param(data.clone());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), data.data());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn large_margin_loss_vanishes() {
        let mut last = f32::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 80.0] {
            let mut tape = Tape::new();
            let logits = tape.param(Tensor::matrix(1, 3, vec![margin, 0.0, 0.0]).unwrap());
            let loss = tape.cross_entropy(logits, &[0]).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[1, 2]));
        assert!(matches!(tape.cross_entropy(logits, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_tensor_accumulates() {
        // loss = sum(w + w) -> grad 2
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        let s = tape.add(w, w).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 2], 1.0));
        let w = tape.param(Tensor::filled(&[2, 1], 0.5));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0]);
    }
}
