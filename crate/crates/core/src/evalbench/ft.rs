// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::datagen::{EditCase, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, DiffGraph, Scalar, Tensor};
use crate::toyvlm::diff::{layer_graph, nll_at_rows};
use crate::toyvlm::{argmax, LayerParams, ToyVlm};
use crate::training::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtConfig {
    pub max_steps: usize,
    pub lr: f64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            max_steps: 50,
            lr: 1e-2,
        }
    }
}

/// Replacement for the last transformer layer; `None` when no step was taken.
#[derive(Debug, Clone)]
pub struct FtOverlay<T> {
    pub layer: Option<LayerParams<T>>,
    pub steps: usize,
}

/// Fine-tunes only the last layer on the edit sample until its answer is the
/// greedy teacher-forced prediction or `max_steps` is reached.
pub fn ft_baseline<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    case: &EditCase,
    config: &FtConfig,
) -> Result<FtOverlay<T>> {
    if config.max_steps == 0 {
        return Err(Error::Contract("fine-tuning needs max_steps >= 1".into()));
    }
    let prompt = case.edit.prompt_ids(vocab)?;
    let answer = case.edit.answer_ids(vocab)?;
    if answer.is_empty() {
        return Err(Error::Contract("edit answer is empty".into()));
    }
    let mut tokens = prompt.clone();
    tokens.extend(&answer);
    let emb = model.embed(case.edit.image.as_ref(), &tokens)?;
    let first = emb.n_visual + prompt.len() - 1;
    let targets: Vec<(usize, usize)> = answer.iter().enumerate().map(|(i, &a)| (first + i, a)).collect();
    let trace = model.forward_trace(&emb)?;
    let big_l = model.config.layers;
    let h_in = trace.h(big_l - 1).clone();
    let layout = AttnLayout::single(model.config.heads, h_in.rows());

    let last_logits = |layer: &LayerParams<T>| -> Result<Tensor<T>> {
        let mut g = DiffGraph::new();
        let lv = layer.to_graph(&mut g, false);
        let x = g.constant(h_in.clone());
        let h = layer_graph(&mut g, &lv, x, &layout);
        g.value(h).matmul(&model.params.unembed)
    };
    let hits = |logits: &Tensor<T>| targets.iter().all(|&(r, t)| argmax(logits.row(r)) == t);
    if hits(&trace.logits) {
        return Ok(FtOverlay { layer: None, steps: 0 });
    }
    let mut layer = model.params.layers[big_l - 1].clone();
    let mut opt = Adam::new(config.lr);
    let mut steps = 0;
    while steps < config.max_steps {
        let mut g = DiffGraph::new();
        let lv = layer.to_graph(&mut g, true);
        let x = g.constant(h_in.clone());
        let u = g.constant(model.params.unembed.clone());
        let h = layer_graph(&mut g, &lv, x, &layout);
        let loss = nll_at_rows(&mut g, h, u, &targets);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NumericDomain(format!("fine-tuning loss at step {steps}")));
        }
        let grads = g.backward(loss)?;
        let gts: Vec<Tensor<T>> = lv
            .ordered()
            .iter()
            .map(|&v| grads.get(v).cloned().expect("layer gradient"))
            .collect();
        let grefs: Vec<&Tensor<T>> = gts.iter().collect();
        let mut prefs: Vec<&mut Tensor<T>> = layer.named_mut().into_iter().map(|(_, t)| t).collect();
        opt.update(&mut prefs, &grefs, 1.0)?;
        steps += 1;
        if hits(&last_logits(&layer)?) {
            break;
        }
    }
    Ok(FtOverlay {
        layer: Some(layer),
        steps,
    })
}
