// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contribution statistics over a sample set.

use serde::{Deserialize, Serialize};

use super::contribution::{
    control_attribution, high_contribution_layers, mean_layer_contribution, module_contribution, ModuleContribution,
};
use crate::datagen::{QaSample, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::toyvlm::{HiddenTrace, ToyVlm};

/// Layer statistics of the first answer token over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub samples: usize,
    /// Mean combined contribution per layer, index `l - 1`.
    pub layer_means: Vec<f64>,
    pub l_h: Vec<usize>,
    pub shallow_mean: f64,
    pub deep_mean: f64,
}

/// Mean of the first and of the second half of `layer_means`. With an odd
/// count the middle layer goes to neither half.
pub fn half_means(layer_means: &[f64]) -> Result<(f64, f64)> {
    let half = layer_means.len() / 2;
    if half == 0 {
        return Err(Error::Contract("need at least two layers".into()));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((
        mean(&layer_means[..half]),
        mean(&layer_means[layer_means.len() - half..]),
    ))
}

/// Trace of the prompt and the first answer token of `s`.
pub fn prompt_trace<T: Scalar>(model: &ToyVlm<T>, vocab: &Vocab, s: &QaSample) -> Result<(HiddenTrace<T>, usize)> {
    let prompt = s.prompt_ids(vocab)?;
    let key = *s
        .answer_ids(vocab)?
        .first()
        .ok_or_else(|| Error::Contract(format!("sample `{}` has an empty answer", s.prompt)))?;
    let trace = model.forward_trace(&model.embed(s.image.as_ref(), &prompt)?)?;
    Ok((trace, key))
}

/// Module contributions for every sample and the derived layer statistics.
pub fn calibrate<T: Scalar>(
    model: &ToyVlm<T>,
    vocab: &Vocab,
    samples: &[QaSample],
    fraction: f64,
) -> Result<(Vec<ModuleContribution>, Calibration)> {
    let set = samples
        .iter()
        .map(|s| {
            let (trace, key) = prompt_trace(model, vocab, s)?;
            module_contribution(model, &trace, key)
        })
        .collect::<Result<Vec<_>>>()?;
    let layer_means = mean_layer_contribution(&set)?;
    let l_h = high_contribution_layers(&layer_means, fraction)?;
    let (shallow_mean, deep_mean) = half_means(&layer_means)?;
    let cal = Calibration {
        samples: set.len(),
        layer_means,
        l_h,
        shallow_mean,
        deep_mean,
    };
    Ok((set, cal))
}

/// For each sample, the first answer token of the next sample (cyclically)
/// whose answer starts differently. Mirrors scoring a sample against the
/// answer of an unrelated one.
pub fn unrelated_answers(vocab: &Vocab, samples: &[QaSample]) -> Result<Vec<usize>> {
    let firsts = samples
        .iter()
        .map(|s| {
            s.answer_ids(vocab)?
                .first()
                .copied()
                .ok_or_else(|| Error::Contract(format!("sample `{}` has an empty answer", s.prompt)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = firsts.len();
    (0..n)
        .map(|i| {
            (1..n)
                .map(|k| firsts[(i + k) % n])
                .find(|&w| w != firsts[i])
                .ok_or_else(|| Error::Degenerate("every sample has the same answer".into()))
        })
        .collect()
}

/// Aggregate of the correct-versus-wrong control over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub samples: usize,
    pub mean_correct: f64,
    pub mean_wrong: f64,
    pub ratio: f64,
    pub layer_means_correct: Vec<f64>,
    pub layer_means_wrong: Vec<f64>,
}

pub fn control_summary<T: Scalar>(model: &ToyVlm<T>, vocab: &Vocab, samples: &[QaSample]) -> Result<ControlSummary> {
    let wrong = unrelated_answers(vocab, samples)?;
    let mut correct_set = Vec::with_capacity(samples.len());
    let mut wrong_set = Vec::with_capacity(samples.len());
    for (s, &w) in samples.iter().zip(&wrong) {
        let (trace, key) = prompt_trace(model, vocab, s)?;
        let r = control_attribution(model, &trace, key, w)?;
        correct_set.push(r.correct);
        wrong_set.push(r.wrong);
    }
    let mc = correct_set.iter().map(|m| m.mean_c()).sum::<f64>() / samples.len() as f64;
    let mw = wrong_set.iter().map(|m| m.mean_c()).sum::<f64>() / samples.len() as f64;
    Ok(ControlSummary {
        samples: samples.len(),
        mean_correct: mc,
        mean_wrong: mw,
        ratio: super::contribution::ratio(mc, mw),
        layer_means_correct: mean_layer_contribution(&correct_set)?,
        layer_means_wrong: mean_layer_contribution(&wrong_set)?,
    })
}
