// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference verification of graph gradients.

use super::graph::{DiffGraph, Gradients, Var};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// One checked parameter entry.
#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub param: Var,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |analytic|)`
    pub error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &EntryCheck> {
        self.entries.iter().filter(|e| !e.pass)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.error).fold(0.0, f64::max)
    }
}

/// Which entries of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Sampling {
    All,
    /// At most this many evenly strided entries per parameter.
    PerParam(usize),
}

fn entry_indices(len: usize, sampling: Sampling) -> Vec<usize> {
    match sampling {
        Sampling::All => (0..len).collect(),
        Sampling::PerParam(k) if k >= len => (0..len).collect(),
        Sampling::PerParam(k) => {
            let stride = len as f64 / k as f64;
            (0..k).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
        }
    }
}

/// Runs `backward` and compares every sampled parameter entry against a
/// central difference `(f(θ+h) - f(θ-h)) / 2h`.
pub fn grad_check<T: Scalar>(
    graph: &mut DiffGraph<T>,
    loss: Var,
    step: f64,
    tolerance: f64,
    sampling: Sampling,
) -> Result<GradCheckReport> {
    let analytic = graph.backward(loss)?;
    compare_gradients(graph, loss, &analytic, step, tolerance, sampling)
}

/// Checks externally supplied gradients, e.g. deliberately corrupted ones.
pub fn compare_gradients<T: Scalar>(
    graph: &mut DiffGraph<T>,
    loss: Var,
    analytic: &Gradients<T>,
    step: f64,
    tolerance: f64,
    sampling: Sampling,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {step}")));
    }
    let h = T::from_f64_lossy(step);
    let mut entries = Vec::new();
    for &p in analytic.params() {
        let base = graph.value(p).clone();
        let grad = analytic
            .get(p)
            .ok_or_else(|| Error::Contract("missing gradient for parameter".into()))?;
        for idx in entry_indices(base.len(), sampling) {
            let mut plus = base.clone();
            plus.data_mut()[idx] += h;
            graph.set_leaf(p, plus)?;
            graph.recompute();
            let f_plus = graph.scalar(loss).as_f64();

            let mut minus = base.clone();
            minus.data_mut()[idx] -= h;
            graph.set_leaf(p, minus)?;
            graph.recompute();
            let f_minus = graph.scalar(loss).as_f64();

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[idx].as_f64();
            let error = (a - numeric).abs() / a.abs().max(1.0);
            entries.push(EntryCheck {
                param: p,
                index: idx,
                analytic: a,
                numeric,
                error,
                pass: error < tolerance,
            });
        }
        graph.set_leaf(p, base)?;
    }
    graph.recompute();
    Ok(GradCheckReport {
        step,
        tolerance,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn constant_loss_passes_with_zero_gradients() {
        let mut g = DiffGraph::<f64>::new();
        let w = g.param(Tensor::from_rows(2, 2, vec![0.3, -0.1, 0.7, 2.0]));
        let c = g.constant(Tensor::zeros(&[2, 2]));
        let z = g.mul(w, c);
        let loss = g.sum(z);
        let report = grad_check(&mut g, loss, 1e-5, 1e-6, Sampling::All).unwrap();
        assert!(report.all_pass());
        assert!(report.entries.iter().all(|e| e.analytic == 0.0 && e.numeric == 0.0));
    }

    #[test]
    fn corrupted_entry_is_flagged() {
        let mut g = DiffGraph::<f64>::new();
        let w = g.param(Tensor::from_rows(1, 3, vec![0.3, -0.1, 0.7]));
        let s = g.sigmoid(w);
        let loss = g.sum(s);
        let mut grads = g.backward(loss).unwrap();
        grads.get_mut(w).unwrap().data_mut()[1] *= 2.0;
        let report = compare_gradients(&mut g, loss, &grads, 1e-5, 1e-3, Sampling::All).unwrap();
        let failed: Vec<usize> = report.failures().map(|e| e.index).collect();
        assert_eq!(failed, vec![1]);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let mut g = DiffGraph::<f64>::new();
        let w = g.param(Tensor::scalar(1.0));
        let loss = g.sum(w);
        assert!(grad_check(&mut g, loss, 0.0, 1e-3, Sampling::All).is_err());
    }
}
