// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation, divergence and attention kernels.
//!
//! These functions are the single source of arithmetic for both the plain
//! inference path and the differentiable graph, so the two stay bitwise
//! consistent.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_finite<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// In-place max-stabilized softmax of a contiguous slice.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// In-place log-softmax of a contiguous slice.
pub fn log_softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax<T: Scalar>(v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = v.shape();
    if axis >= shape.len() {
        return Err(Error::Index(format!("softmax axis {axis} for rank {}", shape.len())));
    }
    check_finite(v.data(), "softmax")?;
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = v.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = data[base + k * inner];
            }
            softmax_in_place(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                data[base + k * inner] = *b;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow: `-softplus(-x)`.
#[inline]
pub fn log_sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Elementwise logistic sigmoid.
pub fn sigmoid<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.data().iter().any(|x| x.is_nan()) {
        return Err(Error::NumericDomain("sigmoid: NaN input".into()));
    }
    Ok(v.map(sigmoid_scalar))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn check_distribution<T: Scalar>(p: &[T], name: &str) -> Result<()> {
    check_finite(p, name)?;
    if p.iter().any(|&x| x < T::zero()) {
        return Err(Error::NumericDomain(format!("{name}: negative probability")));
    }
    let s = p.iter().copied().sum::<T>().as_f64();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::NumericDomain(format!("{name}: sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p ln(p/q)` in nats.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("kl: {} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "kl p")?;
    check_distribution(q, "kl q")?;
    let mut acc = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > T::zero() {
            if qi <= T::zero() {
                return Err(Error::NumericDomain("kl: q has zero mass where p is positive".into()));
            }
            acc += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative residue when p and q nearly agree.
    Ok(acc.max(T::zero()))
}

/// Mean negative log-likelihood of `targets` under per-row logits.
pub fn nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (rows, vocab) = (logits.rows(), logits.cols());
    if rows != targets.len() {
        return Err(Error::Shape(format!(
            "nll: {rows} logit rows for {} targets",
            targets.len()
        )));
    }
    if rows == 0 {
        return Err(Error::Contract("nll: no positions".into()));
    }
    check_finite(logits.data(), "nll")?;
    let mut total = T::zero();
    let mut buf = vec![T::zero(); vocab];
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Index(format!("target {t} outside vocabulary {vocab}")));
        }
        buf.copy_from_slice(logits.row(r));
        log_softmax_in_place(&mut buf);
        total -= buf[t];
    }
    Ok(total / T::from_usize_lossy(rows))
}

/// Cosine similarity computed as `dot / sqrt(|a|² |b|²)`, clamped to [-1, 1].
///
/// For `a == b` the expression evaluates to exactly 1.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == T::zero() {
        return T::zero();
    }
    (dot / denom).max(-T::one()).min(T::one())
}

/// Head/segment layout for packed causal self-attention.
///
/// Several independent sequences are stacked row-wise; each `(start, len)`
/// segment attends causally within itself only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub segments: Vec<(usize, usize)>,
}

impl AttnLayout {
    pub fn single(heads: usize, len: usize) -> Self {
        Self {
            heads,
            segments: vec![(0, len)],
        }
    }

    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn max_len(&self) -> usize {
        self.segments.iter().map(|s| s.1).max().unwrap_or(0)
    }
}

/// Attention output for a single query row over keys/values `start..=last`.
///
/// `q`, `out` have width `d`; `keys` and `values` are full `rows x d`
/// matrices. When `probs` is given it receives `heads * (last-start+1)`
/// attention weights, head-major.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    d: usize,
    heads: usize,
    start: usize,
    last: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let dh = d / heads;
    let span = last + 1 - start;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut w = vec![T::zero(); span];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, wj) in w.iter_mut().enumerate() {
            let kr = &keys[(start + j) * d + h * dh..(start + j) * d + (h + 1) * dh];
            let mut s = T::zero();
            for (&a, &b) in qh.iter().zip(kr) {
                s += a * b;
            }
            *wj = s * scale;
        }
        softmax_in_place(&mut w);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|v| *v = T::zero());
        for (j, &wj) in w.iter().enumerate() {
            let vr = &values[(start + j) * d + h * dh..(start + j) * d + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vr) {
                *o += wj * v;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * span..(h + 1) * span].copy_from_slice(&w);
        }
    }
}

/// Packed causal multi-head attention (before the output projection).
///
/// Returns the context matrix and, when `keep_probs`, a dense probability
/// buffer of shape `rows x heads x max_len` used by [`attention_backward`].
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttnLayout,
    keep_probs: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let d = q.cols();
    let rows = q.rows();
    let heads = layout.heads;
    let max_len = layout.max_len();
    let mut out = Tensor::zeros(&[rows, d]);
    let mut probs = keep_probs.then(|| vec![T::zero(); rows * heads * max_len]);
    let mut scratch = vec![T::zero(); heads * max_len];
    for &(start, len) in &layout.segments {
        for i in start..start + len {
            let span = i + 1 - start;
            let p = probs.as_ref().map(|_| &mut scratch[..heads * span]);
            attend_row(q.row(i), k.data(), v.data(), d, heads, start, i, out.row_mut(i), p);
            if let Some(all) = probs.as_mut() {
                for h in 0..heads {
                    let dst = (i * heads + h) * max_len;
                    all[dst..dst + span].copy_from_slice(&scratch[h * span..(h + 1) * span]);
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
pub fn attention_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    layout: &AttnLayout,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let rows = q.rows();
    let heads = layout.heads;
    let dh = d / heads;
    let max_len = layout.max_len();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = Tensor::zeros(&[rows, d]);
    let mut dk = Tensor::zeros(&[rows, d]);
    let mut dv = Tensor::zeros(&[rows, d]);
    let mut dp = vec![T::zero(); max_len];
    for &(start, len) in &layout.segments {
        for i in start..start + len {
            let span = i + 1 - start;
            for h in 0..heads {
                let p = &probs[(i * heads + h) * max_len..(i * heads + h) * max_len + span];
                let go = &grad_out.row(i)[h * dh..(h + 1) * dh];
                let mut dot_pdp = T::zero();
                for j in 0..span {
                    let r = start + j;
                    let vr = &v.row(r)[h * dh..(h + 1) * dh];
                    let mut s = T::zero();
                    for (&g, &x) in go.iter().zip(vr) {
                        s += g * x;
                    }
                    dp[j] = s;
                    dot_pdp += p[j] * s;
                    let dvr = &mut dv.row_mut(r)[h * dh..(h + 1) * dh];
                    for (o, &g) in dvr.iter_mut().zip(go) {
                        *o += p[j] * g;
                    }
                }
                for j in 0..span {
                    let r = start + j;
                    let ds = p[j] * (dp[j] - dot_pdp) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let kc = k.row(r)[h * dh + c];
                        let qc = q.row(i)[h * dh + c];
                        dq.row_mut(i)[h * dh + c] += ds * kc;
                        dk.row_mut(r)[h * dh + c] += ds * qc;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
