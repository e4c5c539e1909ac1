// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::editors::VeadEditor;
use super::metrics::{evaluate, MetricsReport};
use crate::datagen::{gen_edit_cases, EditCase, EditCaseOptions, Vocab};
use crate::error::Result;
use crate::numerics::{Scalar, Tensor};
use crate::toyvlm::{Answerer, ToyVlm};
use crate::training::{prepare_case, train_loop, PreparedCase, TrainConfig, TrainOutcome, TrainStepReport};
use crate::vead::{compute_edit_signal, im_intensity, VeadParams};

/// Where the adapter sits and how it is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSetup {
    pub l_e: usize,
    pub d_a: usize,
    pub seed: u64,
}

impl Default for AdapterSetup {
    fn default() -> Self {
        Self {
            l_e: 4,
            d_a: 32,
            seed: 29,
        }
    }
}

/// Switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub drop_im_down: bool,
    pub drop_im_up: bool,
    pub drop_im_align: bool,
    pub drop_im: bool,
    pub drop_ca: bool,
}

impl Ablation {
    pub fn tag(&self) -> String {
        let parts: Vec<&str> = [
            (self.drop_im_down, "-im_down"),
            (self.drop_im_up, "-im_up"),
            (self.drop_im_align, "-im_align"),
            (self.drop_im, "-IM"),
            (self.drop_ca, "-CA"),
        ]
        .into_iter()
        .filter_map(|(on, s)| on.then_some(s))
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

pub fn prepare_cases<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    cases: &[EditCase],
    l_e: usize,
    tc: &TrainConfig,
) -> Result<Vec<PreparedCase<T>>> {
    cases
        .iter()
        .map(|c| prepare_case(model, vocab, c, l_e, &tc.l_h, &tc.perturbation))
        .collect()
}

/// Prepares the cases, then trains a fresh adapter under `ablation`.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    train: &[EditCase],
    setup: &AdapterSetup,
    tc: &TrainConfig,
    ablation: Ablation,
    out_dir: Option<&Path>,
    on_step: impl FnMut(&TrainStepReport),
) -> Result<TrainOutcome<T>> {
    let prepared = prepare_cases(model, vocab, train, setup.l_e, tc)?;
    train_prepared(model, &prepared, setup, tc, ablation, out_dir, on_step)
}

/// Trains a fresh adapter on cases already prepared for `setup.l_e`.
pub fn train_prepared<T: Scalar>(
    model: &ToyVlm<T>,
    prepared: &[PreparedCase<T>],
    setup: &AdapterSetup,
    tc: &TrainConfig,
    ablation: Ablation,
    out_dir: Option<&Path>,
    on_step: impl FnMut(&TrainStepReport),
) -> Result<TrainOutcome<T>> {
    let mut init = VeadParams::init(&model.config, setup.l_e, setup.d_a, setup.seed)?;
    init.drop_im = ablation.drop_im;
    init.drop_ca = ablation.drop_ca;
    let mut tc = tc.clone();
    tc.flags.drop_im_up |= ablation.drop_im_up;
    tc.flags.drop_im_down |= ablation.drop_im_down;
    tc.flags.drop_im_align |= ablation.drop_im_align;
    train_loop(model, prepared, init, &tc, out_dir, on_step)
}

fn snapshot(setup: &AdapterSetup, tc: &TrainConfig, ablation: &Ablation) -> serde_json::Value {
    serde_json::json!({ "adapter": setup, "train": tc, "ablation": ablation })
}

/// Trains under `ablation` and evaluates on held-out cases.
pub fn run_ablation<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    train: &[EditCase],
    eval: &[EditCase],
    setup: &AdapterSetup,
    tc: &TrainConfig,
    ablation: Ablation,
) -> Result<MetricsReport> {
    let outcome = train_adapter(model, vocab, train, setup, tc, ablation, None, |_| {})?;
    let editor = VeadEditor {
        params: outcome.vead,
        tag: format!("vead[{}]", ablation.tag()),
    };
    evaluate(model, &editor, vocab, eval, snapshot(setup, tc, &ablation))
}

/// One adapter per insertion layer, identical seeds and settings otherwise.
pub fn layer_sweep<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    train: &[EditCase],
    eval: &[EditCase],
    layers: &[usize],
    setup: &AdapterSetup,
    tc: &TrainConfig,
) -> Result<Vec<(usize, MetricsReport)>> {
    layers
        .iter()
        .map(|&l| {
            let s = AdapterSetup {
                l_e: l,
                ..setup.clone()
            };
            run_ablation(model, vocab, train, eval, &s, tc, Ablation::default()).map(|r| (l, r))
        })
        .collect()
}

/// Mean intensity over the visual rows of the edit images and of the
/// locality images, each under its own case's edit signal.
pub fn intensity_contrast<T: Scalar>(
    model: &ToyVlm<T>,
    vead: &VeadParams<T>,
    vocab: &Vocab,
    cases: &[EditCase],
) -> Result<(f64, f64)> {
    let (mut on, mut off, mut n) = (0.0, 0.0, 0usize);
    let visual = |img, toks: &[usize]| -> Result<Tensor<T>> {
        let emb = model.embed(Some(img), toks)?;
        let nv = emb.n_visual;
        Ok(model.forward_trace(&emb)?.h(vead.l_e).slice_rows(0, nv))
    };
    for case in cases {
        let prompt = case.edit.prompt_ids(vocab)?;
        let signal = compute_edit_signal(
            model,
            case.edit.image.as_ref(),
            &prompt,
            &case.edit.answer_ids(vocab)?,
            vead.l_e,
            "",
        )?;
        let img = case.edit.image.as_ref().expect("edit image");
        let ml_img = case.ml.image.as_ref().expect("locality image");
        let mean = |v: Vec<T>| v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64;
        on += mean(im_intensity(vead, &visual(img, &prompt)?, &signal)?.1);
        off += mean(im_intensity(vead, &visual(ml_img, &case.ml.prompt_ids(vocab)?)?, &signal)?.1);
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok((on / n, off / n))
}

/// Train and held-out edit cases from disjoint seeds. Held-out ids continue
/// after the training ids so every case keeps a distinct target stream.
pub fn edit_splits<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    seed: u64,
    n_train: usize,
    n_eval: usize,
    counterfactual: bool,
) -> Result<(Vec<EditCase>, Vec<EditCase>)> {
    let cfg = &model.config;
    let opts = EditCaseOptions {
        rows: cfg.grid_rows,
        cols: cfg.grid_cols,
        counterfactual,
    };
    let base = Answerer {
        model,
        eos: vocab.eos(),
        max_new: 3,
    };
    let train = gen_edit_cases(seed, n_train, opts, vocab, &base)?;
    let mut eval = gen_edit_cases(seed ^ 0x5eed_e7a1, n_eval, opts, vocab, &base)?;
    for c in &mut eval {
        c.id += n_train;
    }
    Ok((train, eval))
}

/// The swept insertion layers `{1, L/4, L/2, 3L/4, L}`, deduplicated.
pub fn sweep_layers(layers: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [1, layers / 4, layers / 2, 3 * layers / 4, layers]
        .into_iter()
        .filter(|&l| l >= 1)
        .collect();
    v.dedup();
    v
}
