// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Nodes only reference earlier nodes, so the tape is acyclic by
//! construction and a single reverse sweep computes all gradients. Nodes
//! that do not depend on any parameter are never visited by `backward`.
//!
//! Shape mismatches while recording are programming errors and panic.

use super::kernels::{
    attention_backward, attention_forward, gelu_grad_scalar, gelu_scalar, log_sigmoid_scalar, log_softmax_in_place,
    sigmoid_scalar, softmax_in_place, AttnLayout,
};
use super::scalar::{gemm, Scalar, Trans};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    /// `a[m,n] * s[m,1]` row-wise
    ScaleRows(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    param: bool,
}

/// Recorded computation with parameter leaves.
#[derive(Debug, Clone, Default)]
pub struct DiffGraph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`DiffGraph::backward`], indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter leaf; `None` for non-parameters.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if !self.params.contains(&v) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Euclidean norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|&p| self.get(p))
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Mutable access, used to inject corrupted gradients in checks.
    pub fn get_mut(&mut self, v: Var) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.as_mut())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> DiffGraph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, t, true);
        self.nodes[v.0].param = true;
        v
    }

    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].param)
            .map(Var)
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Replaces the value of a leaf. Call [`recompute`](Self::recompute)
    /// afterwards to refresh downstream nodes.
    pub fn set_leaf(&mut self, v: Var, t: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf on a non-leaf node".into()));
        }
        node.value.same_shape(&t)?;
        node.value = t;
        Ok(())
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, probs) = self.eval(&op);
            if let (Op::Attention { probs: slot, .. }, Some(p)) = (&mut self.nodes[i].op, probs) {
                *slot = p;
            }
            self.nodes[i].value = value;
        }
    }

    fn eval(&self, op: &Op<T>) -> (Tensor<T>, Option<Vec<T>>) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => val(a).matmul(val(b)).expect("matmul shapes"),
            Op::MatMulT(a, b) => val(a).matmul_t(val(b)).expect("matmul_t shapes"),
            Op::Add(a, b) => val(a).add(val(b)).expect("add shapes"),
            Op::Sub(a, b) => val(a).sub(val(b)).expect("sub shapes"),
            Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y).expect("mul shapes"),
            Op::AddRow(a, b) => val(a).add_row(val(b)).expect("bias shape"),
            Op::ScaleRows(a, s) => {
                let (a, s) = (val(a), val(s));
                assert_eq!(s.len(), a.rows(), "scale_rows length");
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let f = s.data()[r];
                    out.row_mut(r).iter_mut().for_each(|x| *x *= f);
                }
                out
            }
            Op::Scale(a, c) => val(a).scale(*c),
            Op::Relu(a) => val(a).map(|x| x.max(T::zero())),
            Op::Gelu(a) => val(a).map(gelu_scalar),
            Op::Sigmoid(a) => val(a).map(sigmoid_scalar),
            Op::LogSigmoid(a) => val(a).map(log_sigmoid_scalar),
            Op::SoftmaxRows(a) => {
                let mut out = val(a).clone();
                let c = out.cols();
                out.data_mut().chunks_mut(c).for_each(softmax_in_place);
                out
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = val(a).clone();
                let c = out.cols();
                out.data_mut().chunks_mut(c).for_each(log_softmax_in_place);
                out
            }
            Op::SliceRows(a, s, e) => val(a).slice_rows(*s, *e),
            Op::ConcatRows(parts) => {
                let refs: Vec<&Tensor<T>> = parts.iter().map(val).collect();
                Tensor::concat_rows(&refs).expect("concat widths")
            }
            Op::GatherRows(a, idx) => val(a).gather_rows(idx),
            Op::Pick(a, idx) => {
                let a = val(a);
                Tensor::row_vector(idx.iter().map(|&(r, c)| a.get(r, c)).collect())
            }
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
            Op::Mean(a) => {
                let a = val(a);
                Tensor::scalar(a.sum() / T::from_usize_lossy(a.len()))
            }
            Op::Attention { q, k, v, layout, .. } => {
                let (out, probs) = attention_forward(val(q), val(k), val(v), layout, true);
                return (out, probs);
            }
        };
        (out, None)
    }

    fn record(&mut self, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.ng(v));
        let (value, probs) = self.eval(&op);
        let op = match (op, probs) {
            (Op::Attention { q, k, v, layout, .. }, Some(p)) => Op::Attention {
                q,
                k,
                v,
                layout,
                probs: p,
            },
            (op, _) => op,
        };
        self.push(op, value, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        self.record(Op::AddRow(a, bias), &[a, bias])
    }

    /// Multiplies row `r` of `a` by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        self.record(Op::ScaleRows(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.record(Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.record(Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::LogSigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::LogSoftmaxRows(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= self.value(a).rows(), "slice_rows range");
        self.record(Op::SliceRows(a, start, end), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.record(Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.record(Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Selects entries `(row, col)` into a `1 x len` row vector.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        self.record(Op::Pick(a, idx.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record(Op::Mean(a), &[a])
    }

    /// Sum of several scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Packed causal multi-head self-attention context (no projections).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        assert_eq!(self.value(q).rows(), layout.rows(), "attention layout rows");
        self.record(
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs: Vec::new(),
            },
            &[q, k, v],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if node.param {
                grads[i] = Some(g);
            }
        }
        let params = self.params();
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].param {
                *slot = None;
            } else if slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let send = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], t);
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), Trans::No, bv.data(), Trans::Yes, &mut ga, false);
                    send(*a, Tensor::from_rows(m, k, ga), grads);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), Trans::Yes, g.data(), Trans::No, &mut gb, false);
                    send(*b, Tensor::from_rows(k, n, gb).reshape(bv.shape()).unwrap(), grads);
                }
            }
            Op::MatMulT(a, b) => {
                // out[m,n] = a[m,k] b[n,k]ᵀ
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), Trans::No, bv.data(), Trans::No, &mut ga, false);
                    send(*a, Tensor::from_rows(m, k, ga), grads);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    gemm(n, m, k, g.data(), Trans::Yes, av.data(), Trans::No, &mut gb, false);
                    send(*b, Tensor::from_rows(n, k, gb).reshape(bv.shape()).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.scale(-T::one()), grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.zip_map(val(b), |x, y| x * y).unwrap(), grads);
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(val(a), |x, y| x * y).unwrap(), grads);
                }
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone(), grads);
                if self.ng(*bias) {
                    let c = g.cols();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (s, &x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    let shape = val(bias).shape().to_vec();
                    send(*bias, Tensor::new(shape, gb).unwrap(), grads);
                }
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (val(a), val(s));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let f = sv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= f);
                    }
                    send(*a, ga, grads);
                }
                if self.ng(*s) {
                    let gs: Vec<T> = (0..av.rows())
                        .map(|r| av.row(r).iter().zip(g.row(r)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    send(*s, Tensor::new(sv.shape().to_vec(), gs).unwrap(), grads);
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c), grads),
            Op::Relu(a) => {
                let ga = g
                    .zip_map(val(a), |gy, x| if x > T::zero() { gy } else { T::zero() })
                    .unwrap();
                send(*a, ga, grads);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(val(a), |gy, x| gy * gelu_grad_scalar(x)).unwrap();
                send(*a, ga, grads);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gy, y| gy * y * (T::one() - y)).unwrap();
                send(*a, ga, grads);
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = 1 - σ(x) = σ(-x)
                let ga = g.zip_map(val(a), |gy, x| gy * sigmoid_scalar(-x)).unwrap();
                send(*a, ga, grads);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for (r, grow) in ga.data_mut().chunks_mut(c).enumerate() {
                    let y = out.row(r);
                    let dot: T = grow.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                    for (gi, &yi) in grow.iter_mut().zip(y) {
                        *gi = yi * (*gi - dot);
                    }
                }
                send(*a, ga, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for (r, grow) in ga.data_mut().chunks_mut(c).enumerate() {
                    let y = out.row(r);
                    let gsum: T = grow.iter().copied().sum();
                    for (gi, &ly) in grow.iter_mut().zip(y) {
                        *gi -= ly.exp() * gsum;
                    }
                }
                send(*a, ga, grads);
            }
            Op::SliceRows(a, s, _) => {
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(val(a).shape());
                    ga.set_rows(*s, g);
                    send(*a, ga, grads);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).rows();
                    if self.ng(*p) {
                        let piece = g.slice_rows(start, start + rows);
                        send(*p, piece.reshape(val(p).shape()).unwrap(), grads);
                    }
                    start += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(val(a).shape());
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, &s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    send(*a, ga, grads);
                }
            }
            Op::Pick(a, idx) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.shape());
                let c = av.cols();
                for (k, &(r, col)) in idx.iter().enumerate() {
                    ga.data_mut()[r * c + col] += g.data()[k];
                }
                send(*a, ga, grads);
            }
            Op::Sum(a) => {
                let gy = g.data()[0];
                send(*a, Tensor::full(val(a).shape(), gy), grads);
            }
            Op::Mean(a) => {
                let av = val(a);
                let gy = g.data()[0] / T::from_usize_lossy(av.len());
                send(*a, Tensor::full(av.shape(), gy), grads);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) = attention_backward(g, val(q), val(k), val(v), probs, layout);
                send(*q, dq, grads);
                send(*k, dk, grads);
                send(*v, dv, grads);
            }
        }
    }
}
