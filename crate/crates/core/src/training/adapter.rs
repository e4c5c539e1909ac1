// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adapter training with the backbone frozen.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{loss_values, objective_graph, CaseDraw, Donor, FrozenSuffix, LossFlags, PreparedCase};
use super::optim::Adam;
use crate::attribution::PerturbationSpec;
use crate::error::{Error, Result};
use crate::numerics::{DiffGraph, Scalar, Tensor};
use crate::toyvlm::ToyVlm;
use crate::vead::VeadParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub max_iters: usize,
    /// Visual positions sampled per case and iteration.
    pub n_s: usize,
    /// Alignment layers; empty means "pick from the contribution analysis".
    pub l_h: Vec<usize>,
    pub checkpoint_every: usize,
    /// Window of the moving average used to select a checkpoint.
    pub smooth_window: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    pub flags: LossFlags,
    pub perturbation: PerturbationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 23,
            lr: 1e-3,
            batch: 4,
            max_iters: 10000,
            n_s: 12,
            l_h: Vec::new(),
            checkpoint_every: 500,
            smooth_window: 100,
            clip: 1.0,
            flags: LossFlags::default(),
            perturbation: PerturbationSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_visual: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("train config: {m}")));
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.n_s == 0 || self.n_s > n_visual {
            return bad(format!("n_s = {} outside 1..={n_visual}", self.n_s));
        }
        if self.checkpoint_every == 0 || self.smooth_window == 0 {
            return bad("checkpoint_every and smooth_window must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {}", self.lr));
        }
        self.perturbation.validate()
    }
}

/// Losses and gradient norm of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub iter: usize,
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub im_up: f64,
    pub im_down: f64,
    pub im_align: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Samples positions and a donor for every case of a batch.
pub fn draw_batch<R: Rng>(rng: &mut R, n_visual: usize, n_s: usize, batch: usize) -> Vec<CaseDraw> {
    (0..batch)
        .map(|_| {
            let mut positions = index::sample(rng, n_visual, n_s).into_vec();
            positions.sort_unstable();
            let donor = if rng.gen_bool(0.5) { Donor::Edit } else { Donor::Mg };
            CaseDraw { positions, donor }
        })
        .collect()
}

/// One gradient step on the adapter. The backbone is only read.
pub fn train_step<T: Scalar>(
    model: &ToyVlm<T>,
    vead: &mut VeadParams<T>,
    batch: &[(&PreparedCase<T>, &CaseDraw)],
    config: &TrainConfig,
    opt: &mut Adam,
    iter: usize,
) -> Result<TrainStepReport> {
    let mut g = DiffGraph::new();
    let suffix = FrozenSuffix::build(&mut g, model, vead.l_e);
    let vv = vead.to_graph(&mut g, true);
    let terms = objective_graph(&mut g, &suffix, vead, &vv, batch, config.flags)?;
    let v = loss_values(&g, &terms);
    let grads = g.backward(terms.total)?;
    let grad_norm = grads.norm();
    let report = TrainStepReport {
        iter,
        rel: v.rel,
        gen: v.gen,
        loc: v.loc,
        im_up: v.im_up,
        im_down: v.im_down,
        im_align: v.im_align,
        total: v.total,
        grad_norm,
    };
    if !v.total.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NumericDomain(format!(
            "non-finite adapter objective at iteration {iter}: {report:?}"
        )));
    }
    let clip = if config.clip > 0.0 && grad_norm > config.clip {
        config.clip / grad_norm
    } else {
        1.0
    };
    let zero = |t: &Tensor<T>| Tensor::zeros(t.shape());
    let gts: Vec<Tensor<T>> = vv
        .ordered()
        .iter()
        .zip(vead.named())
        .map(|(&var, (_, p))| {
            grads
                .get(var)
                .map_or_else(|| zero(p), |t| t.scale(T::from_f64_lossy(clip)))
        })
        .collect();
    let grefs: Vec<&Tensor<T>> = gts.iter().collect();
    let mut prefs: Vec<&mut Tensor<T>> = vead.named_mut().into_iter().map(|(_, t)| t).collect();
    opt.update(&mut prefs, &grefs, 1.0)?;
    Ok(report)
}

/// A stored snapshot and the smoothed loss it was chosen by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iter: usize,
    pub smoothed_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// The selected adapter.
    pub vead: VeadParams<T>,
    pub selected: Option<CheckpointRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub curve: Vec<TrainStepReport>,
}

/// Trains `init` on `cases`, checkpointing periodically and keeping the
/// checkpoint with the lowest smoothed total loss.
///
/// With `out_dir`, checkpoints go to `vead_<iter>.ckpt` and the loss curve to
/// `loss_curve.jsonl` there.
pub fn train_loop<T: Scalar>(
    model: &ToyVlm<T>,
    cases: &[PreparedCase<T>],
    init: VeadParams<T>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&TrainStepReport),
) -> Result<TrainOutcome<T>> {
    if cases.is_empty() {
        return Err(Error::Contract("no training cases".into()));
    }
    let nv = cases[0].n_visual();
    config.validate(nv)?;
    let mut curve_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("loss_curve.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut vead = init;
    let mut opt = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(config.max_iters);
    let mut checkpoints = Vec::new();
    let mut best: Option<(CheckpointRecord, VeadParams<T>)> = None;

    for iter in 1..=config.max_iters {
        let mut picks = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            if order.is_empty() {
                order = (0..cases.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push(order.pop().expect("refilled"));
        }
        let draws = draw_batch(&mut rng, nv, config.n_s, config.batch);
        let batch: Vec<(&PreparedCase<T>, &CaseDraw)> = picks.iter().map(|&i| &cases[i]).zip(&draws).collect();
        let report = train_step(model, &mut vead, &batch, config, &mut opt, iter)?;
        on_step(&report);
        if let Some((w, p)) = curve_file.as_mut() {
            let line = serde_json::to_string(&report).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        curve.push(report);

        if iter % config.checkpoint_every == 0 || iter == config.max_iters {
            let window = &curve[curve.len().saturating_sub(config.smooth_window)..];
            let smoothed = window.iter().map(|r| r.total).sum::<f64>() / window.len() as f64;
            let rec = CheckpointRecord {
                iter,
                smoothed_loss: smoothed,
            };
            if let Some(dir) = out_dir {
                vead.save(&dir.join(format!("vead_{iter:06}.ckpt")))?;
            }
            if best.as_ref().map_or(true, |(b, _)| smoothed < b.smoothed_loss) {
                best = Some((rec.clone(), vead.clone()));
            }
            checkpoints.push(rec);
        }
    }
    if let Some((w, p)) = curve_file.as_mut() {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    let (selected, vead) = match best {
        Some((rec, v)) => (Some(rec), v),
        None => (None, vead),
    };
    Ok(TrainOutcome {
        vead,
        selected,
        checkpoints,
        curve,
    })
}
