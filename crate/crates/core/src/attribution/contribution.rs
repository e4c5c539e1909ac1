// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens contribution of attention and MLP outputs to a key token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_in_place;
use crate::numerics::Scalar;
use crate::toyvlm::{HiddenTrace, ToyVlm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Attention,
    Mlp,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Attention => "attention",
            ModuleKind::Mlp => "mlp",
        }
    }
}

/// Scores of one module output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleScore {
    pub layer: usize,
    pub kind: ModuleKind,
    /// Key-token logit of the projected module output.
    pub logit: f64,
    pub c_p: f64,
    pub c_v: f64,
    pub c: f64,
}

/// Contribution of every attention and MLP output at the last position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleContribution {
    pub key_token: usize,
    /// Ordered by layer, attention before MLP.
    pub scores: Vec<ModuleScore>,
}

/// `sqrt(max(0, c_p * c_v))`
pub fn combine(c_p: f64, c_v: f64) -> f64 {
    (c_p * c_v).max(0.0).sqrt()
}

/// Scores from each module's projected vocabulary logits.
///
/// Returns `(c_p, c_v, c)` per row, with `c_v` normalized by the largest
/// absolute key-token logit over all rows.
pub fn scores_from_logits(rows: &[Vec<f64>], key: usize) -> Result<Vec<(f64, f64, f64)>> {
    if let Some(r) = rows.iter().find(|r| key >= r.len()) {
        return Err(Error::Index(format!(
            "key token {key} outside vocabulary of {}",
            r.len()
        )));
    }
    let denom = rows.iter().map(|r| r[key].abs()).fold(0.0, f64::max);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "key-token logits have max |logit| = {denom}; cannot normalize"
        )));
    }
    Ok(rows
        .iter()
        .map(|r| {
            let mut p = r.clone();
            softmax_in_place(&mut p);
            let c_p = p[key];
            let c_v = r[key] / denom;
            (c_p, c_v, combine(c_p, c_v))
        })
        .collect())
}

impl ModuleContribution {
    pub fn get(&self, layer: usize, kind: ModuleKind) -> Option<&ModuleScore> {
        self.scores.iter().find(|s| s.layer == layer && s.kind == kind)
    }

    pub fn layers(&self) -> usize {
        self.scores.iter().map(|s| s.layer).max().unwrap_or(0)
    }

    /// Mean of the attention and MLP `c` per layer, index `l - 1`.
    pub fn layer_means(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.layers()];
        let mut cnt = vec![0usize; self.layers()];
        for s in &self.scores {
            sum[s.layer - 1] += s.c;
            cnt[s.layer - 1] += 1;
        }
        sum.iter()
            .zip(&cnt)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }

    pub fn mean_c(&self) -> f64 {
        self.scores.iter().map(|s| s.c).sum::<f64>() / self.scores.len().max(1) as f64
    }
}

/// Contribution of every module output at the trace's last position to `key`.
pub fn module_contribution<T: Scalar>(
    model: &ToyVlm<T>,
    trace: &HiddenTrace<T>,
    key: usize,
) -> Result<ModuleContribution> {
    if key >= model.config.vocab_size {
        return Err(Error::Index(format!("key token {key} outside vocabulary")));
    }
    if trace.layers() != model.config.layers {
        return Err(Error::Contract("trace does not come from this model".into()));
    }
    let n = trace.last();
    let mut rows = Vec::with_capacity(2 * trace.layers());
    let mut labels = Vec::with_capacity(rows.capacity());
    for l in 1..=trace.layers() {
        for (kind, t) in [(ModuleKind::Attention, trace.a(l)), (ModuleKind::Mlp, trace.m(l))] {
            let r = crate::numerics::Tensor::row_vector(t.row(n).to_vec());
            let logits = r.matmul(&model.params.unembed)?;
            rows.push(logits.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>());
            labels.push((l, kind));
        }
    }
    let scores = scores_from_logits(&rows, key)?
        .into_iter()
        .zip(&rows)
        .zip(labels)
        .map(|(((c_p, c_v, c), r), (layer, kind))| ModuleScore {
            layer,
            kind,
            logit: r[key],
            c_p,
            c_v,
            c,
        })
        .collect();
    Ok(ModuleContribution { key_token: key, scores })
}

/// Per-layer mean contribution over a calibration set, index `l - 1`.
pub fn mean_layer_contribution(set: &[ModuleContribution]) -> Result<Vec<f64>> {
    let first = set
        .first()
        .ok_or_else(|| Error::Contract("empty calibration set".into()))?;
    let mut acc = vec![0.0; first.layers()];
    for mc in set {
        let m = mc.layer_means();
        if m.len() != acc.len() {
            return Err(Error::Contract("calibration entries disagree on layer count".into()));
        }
        acc.iter_mut().zip(&m).for_each(|(a, v)| *a += v);
    }
    Ok(acc.into_iter().map(|a| a / set.len() as f64).collect())
}

/// The `ceil(fraction * L)` layers with the largest mean contribution,
/// deeper layers winning ties, returned in ascending order.
pub fn high_contribution_layers(layer_means: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if layer_means.is_empty() {
        return Err(Error::Contract("empty calibration set".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * layer_means.len() as f64).ceil() as usize).max(1);
    let mut order: Vec<usize> = (1..=layer_means.len()).collect();
    order.sort_by(|&a, &b| {
        layer_means[b - 1]
            .partial_cmp(&layer_means[a - 1])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Correct-token versus wrong-token contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub correct: ModuleContribution,
    pub wrong: ModuleContribution,
    pub mean_correct: f64,
    pub mean_wrong: f64,
    /// `mean_correct / mean_wrong`, infinite when the wrong token scores zero.
    pub ratio: f64,
}

pub fn ratio(correct: f64, wrong: f64) -> f64 {
    if wrong == 0.0 {
        if correct == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        correct / wrong
    }
}

pub fn control_attribution<T: Scalar>(
    model: &ToyVlm<T>,
    trace: &HiddenTrace<T>,
    key: usize,
    wrong: usize,
) -> Result<ControlReport> {
    if key == wrong {
        return Err(Error::Contract(format!("wrong token {wrong} equals the key token")));
    }
    let correct = module_contribution(model, trace, key)?;
    let wrong = module_contribution(model, trace, wrong)?;
    let (mc, mw) = (correct.mean_c(), wrong.mean_c());
    Ok(ControlReport {
        correct,
        wrong,
        mean_correct: mc,
        mean_wrong: mw,
        ratio: ratio(mc, mw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_example() {
        let rows = vec![vec![2.0, 0.0], vec![-4.0, 1.0]];
        let s = scores_from_logits(&rows, 0).unwrap();
        let want_cp = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((s[0].0 - want_cp).abs() < 1e-12);
        assert!((s[0].0 - 0.88080).abs() < 1e-5);
        assert_eq!(s[0].1, 0.5);
        assert!((s[0].2 - 0.66363).abs() < 1e-5);
        // Negative projection clamps to zero.
        assert_eq!(s[1].2, 0.0);
        assert_eq!(s[1].1, -1.0);
    }

    #[test]
    fn zero_logit_gives_zero_and_all_zero_is_degenerate() {
        let s = scores_from_logits(&[vec![0.0, 3.0], vec![1.0, 0.0]], 0).unwrap();
        assert_eq!(s[0].2, 0.0);
        let e = scores_from_logits(&[vec![0.0, 3.0], vec![0.0, 1.0]], 0).unwrap_err();
        assert!(matches!(e, Error::Degenerate(_)));
    }

    #[test]
    fn combine_is_monotone() {
        for i in 0..=20 {
            let a = i as f64 / 20.0;
            for j in 0..20 {
                let b = j as f64 / 20.0;
                assert!(combine(a, b + 0.05) >= combine(a, b));
                assert!(combine(b + 0.05, a) >= combine(b, a));
            }
        }
    }

    #[test]
    fn layer_selection_ties_and_order() {
        assert_eq!(high_contribution_layers(&[0.5; 8], 0.25).unwrap(), vec![7, 8]);
        let inc: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        assert_eq!(high_contribution_layers(&inc, 0.25).unwrap(), vec![7, 8]);
        let peak = [0.1, 0.9, 0.2, 0.8, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(high_contribution_layers(&peak, 0.25).unwrap(), vec![2, 4]);
        assert!(high_contribution_layers(&[], 0.25).is_err());
        assert!(high_contribution_layers(&inc, 0.0).is_err());
    }
}
