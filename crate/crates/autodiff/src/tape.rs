//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so indices are already a
//! topological order and `backward` is a single reverse sweep. A tape belongs
//! to one optimization run; build a fresh one per forward pass.

use crate::element::{gemm, lit, Element};
use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::TensorOf;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
pub(crate) const NORM_EPS: f64 = 1e-8;

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    Upsample2x(Var),
    LeakyRelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    InstanceNorm { input: Var, inv_std: Vec<T> },
    Modulate { input: Var, scale: Var, bias: Var },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Softplus(Var),
    BceWithLogits(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub value: TensorOf<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are produced for it only if `requires_grad`.
    pub fn leaf(&mut self, value: TensorOf<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: TensorOf<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: TensorOf<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &TensorOf<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends a computed node. Results that depend on no differentiable input
    /// are stored as constants.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: TensorOf<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Computes d`loss`/d`leaf` for every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NotScalar(loss_node.value.shape().to_vec()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; count];
        let mut leaves: Vec<Option<TensorOf<T>>> = vec![None; count];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaves)?;
        }

        Ok(Gradients {
            grads: leaves,
            shapes: self.nodes[..count]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(
        &self,
        index: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<TensorOf<T>>],
    ) -> Result<()> {
        let node = &self.nodes[index];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {
                // Leaves are processed exactly once, after every consumer.
                leaves[index] = Some(TensorOf::new(node.value.shape().to_vec(), g)?);
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, &g));
                acc(*b, &mut |s| add_into(s, &g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, &g));
                acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d - x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(&g).zip(bv) {
                        *d = *d + x * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(&g).zip(av) {
                        *d = *d + x * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x * *k)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, &g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| gemm(m, n, k, &g, false, bv, true, s, true));
                acc(*b, &mut |s| gemm(k, m, n, av, true, &g, false, s, true));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| add_into(s, &g));
                let shape = self.shape(*x);
                let (batch, ch) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                acc(*b, &mut |s| {
                    for n in 0..batch {
                        for c in 0..ch {
                            let base = (n * ch + c) * inner;
                            let part: T = g[base..base + inner].iter().copied().sum();
                            s[c] = s[c] + part;
                        }
                    }
                });
            }
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    &g,
                    wants(*input),
                    wants(*weight),
                );
                if let Some(dx) = dx {
                    acc(*input, &mut |s| add_into(s, &dx));
                }
                if let Some(dw) = dw {
                    acc(*weight, &mut |s| add_into(s, &dw));
                }
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x);
                let dx = kernels::upsample2x_backward(&g, shape[0] * shape[1], shape[2], shape[3]);
                acc(*x, &mut |s| add_into(s, &dx));
            }
            Op::LeakyRelu(x) => {
                let slope: T = lit(LEAKY_SLOPE);
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((d, &gv), &v) in s.iter_mut().zip(&g).zip(xv) {
                        *d = *d + if v > T::zero() { gv } else { gv * slope };
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((d, &gv), &yv) in s.iter_mut().zip(&g).zip(y) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((d, &gv), &yv) in s.iter_mut().zip(&g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::InstanceNorm { input, inv_std } => {
                let shape = self.shape(*input);
                let plane = shape[2] * shape[3];
                let dx = kernels::instance_norm_backward(node.value.data(), &g, inv_std, plane);
                acc(*input, &mut |s| add_into(s, &dx));
            }
            Op::Modulate { input, scale, bias } => {
                let shape = self.shape(*input);
                let planes = shape[0] * shape[1];
                let plane = shape[2] * shape[3];
                let (xv, sv) = (val(*input), val(*scale));
                acc(*input, &mut |s| {
                    for p in 0..planes {
                        for i in p * plane..(p + 1) * plane {
                            s[i] = s[i] + g[i] * sv[p];
                        }
                    }
                });
                acc(*scale, &mut |s| {
                    for p in 0..planes {
                        let r = p * plane..(p + 1) * plane;
                        let part: T = g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum();
                        s[p] = s[p] + part;
                    }
                });
                acc(*bias, &mut |s| {
                    for p in 0..planes {
                        let part: T = g[p * plane..(p + 1) * plane].iter().copied().sum();
                        s[p] = s[p] + part;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Mean(x) => {
                let n: T = lit(self.nodes[x.0].value.numel() as f64);
                let g0 = g[0] / n;
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = g[0] * lit(2.0 / av.len() as f64);
                acc(*a, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *d = *d + k * (x - y);
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *d = *d - k * (x - y);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((d, &gv), &v) in s.iter_mut().zip(&g).zip(xv) {
                        *d = *d + gv * sigmoid(v);
                    }
                });
            }
            Op::BceWithLogits(logits, targets) => {
                let (lv, tv) = (val(*logits), val(*targets));
                let k = g[0] / lit(lv.len() as f64);
                acc(*logits, &mut |s| {
                    for ((d, &x), &t) in s.iter_mut().zip(lv).zip(tv) {
                        *d = *d + k * (sigmoid(x) - t);
                    }
                });
                acc(*targets, &mut |s| {
                    for (d, &x) in s.iter_mut().zip(lv) {
                        *d = *d - k * x;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<TensorOf<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` received no gradient.
    pub fn get(&self, v: Var) -> Option<&TensorOf<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> TensorOf<T> {
        match self.get(v) {
            Some(t) => t.clone(),
            None => TensorOf::zeros(self.shapes.get(v.0).cloned().unwrap_or_default()),
        }
    }
}
