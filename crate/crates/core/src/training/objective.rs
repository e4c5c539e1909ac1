// SPDX-License-Identifier: MIT OR Apache-2.0

//! The adapter objective: editing losses, intensity polarity losses and the
//! attribution-aligned intensity loss.

use serde::{Deserialize, Serialize};

use crate::attribution::{perturb_positions, visual_std, PerturbationSpec};
use crate::datagen::{EditCase, QaSample, Vocab};
use crate::error::{Error, Result};
use crate::numerics::kernels::{log_sigmoid_scalar, log_softmax_in_place};
use crate::numerics::{AttnLayout, DiffGraph, Scalar, Tensor, Var};
use crate::toyvlm::diff::{nll_at_rows, LayerVars};
use crate::toyvlm::{HiddenTrace, ToyVlm};
use crate::vead::diff::{adapt_graph, signal_graph, AdaptedVars, VeadVars};
use crate::vead::{compute_edit_signal, EditSignal, VeadParams};

/// Added to each per-layer target sum before normalizing.
pub const ALIGN_EPS: f64 = 1e-8;

/// Loss terms of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms<V> {
    pub rel: V,
    pub gen: V,
    pub loc: V,
    pub im_up: V,
    pub im_down: V,
    pub im_align: V,
    pub total: V,
}

/// Which optional terms are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    pub drop_im_up: bool,
    pub drop_im_down: bool,
    pub drop_im_align: bool,
}

/// Images whose visual rows an adapter rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Donor {
    Edit,
    Mg,
}

/// Layer-`l_e` state of one teacher-forced sequence.
#[derive(Debug, Clone)]
pub struct SeqCache<T> {
    /// Text rows of the base `h[l_e]`.
    pub text: Tensor<T>,
    /// `(row, token)` answer targets within the sequence.
    pub targets: Vec<(usize, usize)>,
}

/// Everything about one edit case that does not depend on the adapter.
#[derive(Debug, Clone)]
pub struct PreparedCase<T> {
    pub id: usize,
    pub signal: EditSignal<T>,
    /// Base `h[l_e]` visual rows of the edit, modal-generality and locality images.
    pub edit_visual: Tensor<T>,
    pub mg_visual: Tensor<T>,
    pub ml_visual: Tensor<T>,
    pub rel: SeqCache<T>,
    pub tg: SeqCache<T>,
    pub mg: SeqCache<T>,
    pub ml: SeqCache<T>,
    /// Base log-probabilities at the locality answer rows.
    pub ml_base_logp: Tensor<T>,
    /// Layers the alignment targets were computed at.
    pub l_h: Vec<usize>,
    /// Alignment targets `[donor][layer in l_h][visual position]`.
    pub targets: [Vec<Vec<f64>>; 2],
}

impl<T> PreparedCase<T> {
    pub fn n_visual(&self) -> usize {
        self.signal.n_visual
    }

    pub fn targets_for(&self, donor: Donor) -> &[Vec<f64>] {
        match donor {
            Donor::Edit => &self.targets[0],
            Donor::Mg => &self.targets[1],
        }
    }
}

/// Per-case random choices of one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseDraw {
    /// Sampled visual positions.
    pub positions: Vec<usize>,
    pub donor: Donor,
}

fn teacher_forced<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    s: &QaSample,
) -> Result<(HiddenTrace<T>, Vec<(usize, usize)>)> {
    let prompt = s.prompt_ids(vocab)?;
    let answer = s.answer_ids(vocab)?;
    if answer.is_empty() {
        return Err(Error::Contract(format!("empty answer for `{}`", s.prompt)));
    }
    let mut tokens = prompt.clone();
    tokens.extend(&answer);
    let emb = model.embed(s.image.as_ref(), &tokens)?;
    let first = emb.n_visual + prompt.len() - 1;
    let targets = answer.iter().enumerate().map(|(i, &a)| (first + i, a)).collect();
    Ok((model.forward_trace(&emb)?, targets))
}

fn split<T: Scalar>(trace: &HiddenTrace<T>, l_e: usize, targets: Vec<(usize, usize)>) -> (Tensor<T>, SeqCache<T>) {
    let h = trace.h(l_e);
    let nv = trace.n_visual;
    (
        h.slice_rows(0, nv),
        SeqCache {
            text: h.slice_rows(nv, h.rows()),
            targets,
        },
    )
}

/// Alignment targets at layer `l`: the edit sequence's layer input with its
/// visual rows taken from `donor`, perturbed position by position.
pub fn attribution_targets<T: Scalar>(
    model: &ToyVlm<T>,
    edit: &HiddenTrace<T>,
    donor: &HiddenTrace<T>,
    l: usize,
    query: usize,
    spec: &PerturbationSpec,
) -> Result<Vec<f64>> {
    let nv = edit.n_visual;
    if donor.n_visual != nv || nv == 0 {
        return Err(Error::Contract(
            "donor and edit traces need equal nonempty visual blocks".into(),
        ));
    }
    if l == 0 || l > model.config.layers {
        return Err(Error::Index(format!("layer {l} outside 1..={}", model.config.layers)));
    }
    let mut h_prev = edit.h(l - 1).clone();
    h_prev.set_rows(0, &donor.h(l - 1).slice_rows(0, nv));
    let sigma = visual_std(&h_prev, nv)?;
    let probe = model.attention_probe(l, &h_prev)?;
    let clean = model.probe_attention(&probe, &Default::default(), query)?;
    let positions: Vec<usize> = (0..nv).collect();
    perturb_positions(model, &probe, &h_prev, &clean, query, &positions, sigma, spec)
}

/// Caches the base states and alignment targets of `case`.
pub fn prepare_case<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    case: &EditCase,
    l_e: usize,
    l_h: &[usize],
    spec: &PerturbationSpec,
) -> Result<PreparedCase<T>> {
    if l_h.is_empty() {
        return Err(Error::Contract("alignment layer set is empty".into()));
    }
    let prompt = case.edit.prompt_ids(vocab)?;
    let answer = case.edit.answer_ids(vocab)?;
    let signal = compute_edit_signal(
        model,
        case.edit.image.as_ref(),
        &prompt,
        &answer,
        l_e,
        &format!("case {}", case.id),
    )?;

    let (edit_trace, rel_t) = teacher_forced(model, vocab, &case.edit)?;
    let (tg_trace, tg_t) = teacher_forced(model, vocab, &case.tg_sample())?;
    let (mg_trace, mg_t) = teacher_forced(model, vocab, &case.mg_sample())?;
    let (ml_trace, ml_t) = teacher_forced(model, vocab, &case.ml)?;

    let (edit_visual, rel) = split(&edit_trace, l_e, rel_t);
    let (_, tg) = split(&tg_trace, l_e, tg_t);
    let (mg_visual, mg) = split(&mg_trace, l_e, mg_t);
    let (ml_visual, ml) = split(&ml_trace, l_e, ml_t.clone());

    let rows: Vec<usize> = ml_t.iter().map(|t| t.0).collect();
    let mut ml_base_logp = ml_trace.logits.gather_rows(&rows);
    for r in 0..ml_base_logp.rows() {
        log_softmax_in_place(ml_base_logp.row_mut(r));
    }

    let spec = PerturbationSpec {
        seed: spec.seed ^ (case.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        ..*spec
    };
    let mut targets: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for (slot, donor) in targets.iter_mut().zip([&edit_trace, &mg_trace]) {
        for &l in l_h {
            slot.push(attribution_targets(model, &edit_trace, donor, l, signal.n_vt, &spec)?);
        }
    }
    Ok(PreparedCase {
        id: case.id,
        signal,
        edit_visual,
        mg_visual,
        ml_visual,
        rel,
        tg,
        mg,
        ml,
        ml_base_logp,
        l_h: l_h.to_vec(),
        targets,
    })
}

/// `(ℓ_im↑, ℓ_im↓)` from raw intensity logits at the sampled positions.
pub fn im_polarity_losses(rel: &[f64], gen: &[f64], loc: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64
        }
    };
    let up = mean(rel, &|x| -log_sigmoid_scalar(x)) + mean(gen, &|x| -log_sigmoid_scalar(x));
    let down = mean(loc, &|x| -log_sigmoid_scalar(-x));
    (up, down)
}

/// Weight of each sampled position in the alignment loss.
pub fn align_weights(targets: &[Vec<f64>]) -> Vec<f64> {
    let n = targets.first().map_or(0, Vec::len);
    let mut w = vec![0.0; n];
    let nl = targets.len() as f64;
    for layer in targets {
        let z: f64 = layer.iter().sum::<f64>() + ALIGN_EPS;
        for (wi, &c) in w.iter_mut().zip(layer) {
            *wi += c / (nl * z);
        }
    }
    w
}

/// `ℓ_im_a` for targets `[layer][position]` and logits over the same positions.
pub fn im_align_loss(targets: &[Vec<f64>], logits: &[f64]) -> Result<f64> {
    if targets.iter().any(|t| t.len() != logits.len()) {
        return Err(Error::Shape("alignment targets and logits differ in length".into()));
    }
    let mut lsm = logits.to_vec();
    log_softmax_in_place(&mut lsm);
    Ok(-align_weights(targets).iter().zip(&lsm).map(|(w, l)| w * l).sum::<f64>())
}

/// Frozen backbone layers after the insertion point, as graph constants.
pub struct FrozenSuffix {
    pub layers: Vec<LayerVars>,
    pub unembed: Var,
    pub heads: usize,
}

impl FrozenSuffix {
    pub fn build<T: Scalar>(g: &mut DiffGraph<T>, model: &ToyVlm<T>, l_e: usize) -> Self {
        Self {
            layers: model.params.layers[l_e..]
                .iter()
                .map(|l| l.to_graph(g, false))
                .collect(),
            unembed: g.constant(model.params.unembed.clone()),
            heads: model.config.heads,
        }
    }
}

fn negated_mean_log_sigmoid<T: Scalar>(g: &mut DiffGraph<T>, logits: Var, positions: &[usize], negate: bool) -> Var {
    let idx: Vec<(usize, usize)> = positions.iter().map(|&p| (0, p)).collect();
    let mut x = g.pick(logits, &idx);
    if negate {
        x = g.scale(x, -T::one());
    }
    let ls = g.log_sigmoid(x);
    let m = g.mean(ls);
    g.scale(m, -T::one())
}

/// Builds the objective for a batch on `g`; adapter parameters enter through `vv`.
pub fn objective_graph<T: Scalar>(
    g: &mut DiffGraph<T>,
    suffix: &FrozenSuffix,
    vead: &VeadParams<T>,
    vv: &VeadVars,
    batch: &[(&PreparedCase<T>, &CaseDraw)],
    flags: LossFlags,
) -> Result<LossTerms<Var>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut pieces = Vec::new();
    let mut segments = Vec::new();
    let mut rel_t = Vec::new();
    let mut tg_t = Vec::new();
    let mut mg_t = Vec::new();
    let mut ml_rows = Vec::new();
    let mut ml_logp = Vec::new();
    let (mut up, mut down, mut align) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    for &(pc, draw) in batch {
        if pc.signal.layer != vead.l_e {
            return Err(Error::Contract(format!(
                "case {} prepared for layer {}, adapter sits at {}",
                pc.id, pc.signal.layer, vead.l_e
            )));
        }
        let nv = pc.n_visual();
        if draw.positions.is_empty() || draw.positions.iter().any(|&p| p >= nv) {
            return Err(Error::Contract(format!("bad sampled positions for case {}", pc.id)));
        }
        let sv = signal_graph(g, vv, &pc.signal);
        let adapted = |g: &mut DiffGraph<T>, hv: &Tensor<T>| -> AdaptedVars {
            let x = g.constant(hv.clone());
            adapt_graph(g, vead, vv, &sv, x)
        };
        let a_edit = adapted(g, &pc.edit_visual);
        let a_mg = adapted(g, &pc.mg_visual);
        let a_ml = adapted(g, &pc.ml_visual);
        for (a, seq, sink) in [
            (&a_edit, &pc.rel, Some(&mut rel_t)),
            (&a_edit, &pc.tg, Some(&mut tg_t)),
            (&a_mg, &pc.mg, Some(&mut mg_t)),
            (&a_ml, &pc.ml, None),
        ] {
            let text = g.constant(seq.text.clone());
            pieces.push(a.h);
            pieces.push(text);
            let len = nv + seq.text.rows();
            segments.push((start, len));
            match sink {
                Some(t) => t.extend(seq.targets.iter().map(|&(r, id)| (start + r, id))),
                None => ml_rows.extend(seq.targets.iter().map(|&(r, _)| start + r)),
            }
            start += len;
        }
        ml_logp.push(&pc.ml_base_logp);

        if !flags.drop_im_up {
            let a = negated_mean_log_sigmoid(g, a_edit.im_logits, &draw.positions, false);
            let b = negated_mean_log_sigmoid(g, a_mg.im_logits, &draw.positions, false);
            up.push(g.add(a, b));
        }
        if !flags.drop_im_down {
            down.push(negated_mean_log_sigmoid(g, a_ml.im_logits, &draw.positions, true));
        }
        if !flags.drop_im_align {
            let (logits, targets) = match draw.donor {
                Donor::Edit => (a_edit.im_logits, pc.targets_for(Donor::Edit)),
                Donor::Mg => (a_mg.im_logits, pc.targets_for(Donor::Mg)),
            };
            let picked: Vec<Vec<f64>> = targets
                .iter()
                .map(|layer| draw.positions.iter().map(|&p| layer[p]).collect())
                .collect();
            let w: Vec<T> = align_weights(&picked).into_iter().map(T::from_f64_lossy).collect();
            let idx: Vec<(usize, usize)> = draw.positions.iter().map(|&p| (0, p)).collect();
            let x = g.pick(logits, &idx);
            let lsm = g.log_softmax_rows(x);
            let wv = g.constant(Tensor::row_vector(w));
            let prod = g.mul(wv, lsm);
            let s = g.sum(prod);
            align.push(g.scale(s, -T::one()));
        }
    }

    let x = g.concat_rows(&pieces);
    let layout = AttnLayout {
        heads: suffix.heads,
        segments,
    };
    let h = suffix
        .layers
        .iter()
        .fold(x, |h, lv| crate::toyvlm::diff::layer_graph(g, lv, h, &layout));
    let rel = nll_at_rows(g, h, suffix.unembed, &rel_t);
    let nll_tg = nll_at_rows(g, h, suffix.unembed, &tg_t);
    let nll_mg = nll_at_rows(g, h, suffix.unembed, &mg_t);
    let gen = g.add(nll_mg, nll_tg);

    let lp_refs: Vec<&Tensor<T>> = ml_logp.into_iter().collect();
    let lp = Tensor::concat_rows(&lp_refs)?;
    let p = lp.map(|v| v.exp());
    let hs = g.gather_rows(h, &ml_rows);
    let logits = g.matmul(hs, suffix.unembed);
    let lq = g.log_softmax_rows(logits);
    let lp_c = g.constant(lp);
    let p_c = g.constant(p);
    let diff = g.sub(lp_c, lq);
    let kl = g.mul(p_c, diff);
    let kl = g.sum(kl);
    let loc = g.scale(kl, T::one() / T::from_usize_lossy(ml_rows.len()));

    let inv_b = T::one() / T::from_usize_lossy(batch.len());
    let avg = |g: &mut DiffGraph<T>, terms: &[Var]| -> Var {
        if terms.is_empty() {
            g.constant(Tensor::scalar(T::zero()))
        } else {
            let s = g.add_all(terms);
            g.scale(s, inv_b)
        }
    };
    let im_up = avg(g, &up);
    let im_down = avg(g, &down);
    let im_align = avg(g, &align);
    let total = g.add_all(&[rel, gen, loc, im_up, im_down, im_align]);
    Ok(LossTerms {
        rel,
        gen,
        loc,
        im_up,
        im_down,
        im_align,
        total,
    })
}

/// Reads the scalar value of every term.
pub fn loss_values<T: Scalar>(g: &DiffGraph<T>, terms: &LossTerms<Var>) -> LossTerms<f64> {
    let v = |x: Var| g.scalar(x).as_f64();
    LossTerms {
        rel: v(terms.rel),
        gen: v(terms.gen),
        loc: v(terms.loc),
        im_up: v(terms.im_up),
        im_down: v(terms.im_down),
        im_align: v(terms.im_align),
        total: v(terms.total),
    }
}

/// Evaluates the objective without taking a step.
pub fn objective_values<T: Scalar>(
    model: &ToyVlm<T>,
    vead: &VeadParams<T>,
    batch: &[(&PreparedCase<T>, &CaseDraw)],
    flags: LossFlags,
) -> Result<LossTerms<f64>> {
    let mut g = DiffGraph::new();
    let suffix = FrozenSuffix::build(&mut g, model, vead.l_e);
    let vv = vead.to_graph(&mut g, false);
    let terms = objective_graph(&mut g, &suffix, vead, &vv, batch, flags)?;
    Ok(loss_values(&g, &terms))
}
