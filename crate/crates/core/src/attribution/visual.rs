// SPDX-License-Identifier: MIT OR Apache-2.0

//! Noise-perturbation contribution of visual hidden states to a later
//! attention output.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::cosine;
use crate::numerics::{Scalar, Tensor};
use crate::toyvlm::{AttentionProbe, HiddenTrace, ToyVlm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    /// Noise standard deviation in units of the visual-block std.
    pub multiplier: f64,
    /// Noise draws averaged per position.
    pub draws: usize,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            multiplier: 3.0,
            draws: 8,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    /// Zero-noise spec; every contribution is exactly zero.
    pub fn zero_noise() -> Self {
        Self {
            multiplier: 0.0,
            draws: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::Contract("perturbation draws must be >= 1".into()));
        }
        if !(self.multiplier >= 0.0 && self.multiplier.is_finite()) {
            return Err(Error::Contract(format!("noise multiplier {}", self.multiplier)));
        }
        Ok(())
    }
}

/// Per-visual-position contribution scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualContributionMap {
    pub layer: usize,
    pub query: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// `(1 - cos(perturbed, clean)) / 2`
pub fn perturbation_score<T: Scalar>(perturbed: &[T], clean: &[T]) -> f64 {
    let c = cosine(perturbed, clean).as_f64();
    ((1.0 - c) / 2.0).clamp(0.0, 1.0)
}

/// Population std of the first `n_visual` rows of `h`.
pub fn visual_std<T: Scalar>(h: &Tensor<T>, n_visual: usize) -> Result<f64> {
    let s = h.slice_rows(0, n_visual).std().as_f64();
    if s == 0.0 || !s.is_finite() {
        return Err(Error::Degenerate(format!("visual block std = {s}")));
    }
    Ok(s)
}

/// Perturbation scores at `positions` of the layer input held by `probe`.
///
/// `h_prev` is that layer input, `clean` the unperturbed attention output at
/// `query`, and `sigma` the reference std.
#[allow(clippy::too_many_arguments)]
pub fn perturb_positions<T: Scalar>(
    model: &ToyVlm<T>,
    probe: &AttentionProbe<T>,
    h_prev: &Tensor<T>,
    clean: &[T],
    query: usize,
    positions: &[usize],
    sigma: f64,
    spec: &PerturbationSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let normal = Normal::new(0.0, spec.multiplier * sigma)
        .map_err(|e| Error::NumericDomain(format!("noise distribution: {e}")))?;
    let mut out = Vec::with_capacity(positions.len());
    for &n in positions {
        if n > query {
            return Err(Error::Contract(format!("position {n} after query {query}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(((probe.layer as u64) << 32) | n as u64);
        let base = h_prev.row(n);
        let mut acc = 0.0;
        for _ in 0..spec.draws {
            let row: Vec<T> = base
                .iter()
                .map(|&x| x + T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            let ov: BTreeMap<usize, Vec<T>> = [(n, row)].into();
            let pert = model.probe_attention(probe, &ov, query)?;
            acc += perturbation_score(&pert, clean);
        }
        out.push((acc / spec.draws as f64).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Contribution of every visual hidden state entering layer `l` to the
/// layer-`l` attention output at `query`.
pub fn visual_contribution<T: Scalar>(
    model: &ToyVlm<T>,
    trace: &HiddenTrace<T>,
    l: usize,
    query: usize,
    spec: &PerturbationSpec,
) -> Result<VisualContributionMap> {
    let cfg = &model.config;
    if l == 0 || l > cfg.layers {
        return Err(Error::Index(format!("layer {l} outside 1..={}", cfg.layers)));
    }
    let nv = trace.n_visual;
    if nv == 0 {
        return Err(Error::Contract("trace has no visual positions".into()));
    }
    if query + 1 < nv || query >= trace.len() {
        return Err(Error::Contract(format!(
            "query {query} must lie in {}..{}",
            nv - 1,
            trace.len()
        )));
    }
    let h_prev = trace.h(l - 1);
    let sigma = visual_std(h_prev, nv)?;
    let positions: Vec<usize> = (0..nv).collect();
    let values = perturb_positions(
        model,
        trace.probe(l),
        h_prev,
        trace.a(l).row(query),
        query,
        &positions,
        sigma,
        spec,
    )?;
    Ok(VisualContributionMap {
        layer: l,
        query,
        rows: cfg.grid_rows,
        cols: cfg.grid_cols,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{random_scene, substream, Color, Shape};
    use crate::toyvlm::ModelConfig;

    fn setup() -> (ToyVlm<f64>, HiddenTrace<f64>) {
        let cfg = ModelConfig {
            layers: 3,
            d_model: 16,
            heads: 2,
            d_ff: 16,
            init_std: 0.2,
            ..ModelConfig::default()
        };
        let m = ToyVlm::<f64>::init(cfg, 4).unwrap();
        let mut rng = substream(5, 0);
        let img = random_scene(&mut rng, 4, 4, &Shape::ALL, &Color::ALL, None, None).image;
        let t = m.forward_trace(&m.embed(Some(&img), &[0, 5, 6, 2]).unwrap()).unwrap();
        (m, t)
    }

    #[test]
    fn antipodal_and_orthogonal_scores() {
        assert_eq!(perturbation_score(&[-1.0, 2.0], &[1.0, -2.0]), 1.0);
        assert_eq!(perturbation_score(&[0.0, 3.0], &[1.0, 0.0]), 0.5);
        assert_eq!(perturbation_score(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn zero_noise_gives_zero_map() {
        let (m, t) = setup();
        for l in 1..=3 {
            let map = visual_contribution(&m, &t, l, t.last(), &PerturbationSpec::zero_noise()).unwrap();
            assert!(map.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bounded_and_seed_deterministic() {
        let (m, t) = setup();
        let spec = PerturbationSpec {
            seed: 9,
            ..Default::default()
        };
        let a = visual_contribution(&m, &t, 2, t.last(), &spec).unwrap();
        let b = visual_contribution(&m, &t, 2, t.last(), &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.values.iter().any(|&v| v > 0.0));
        let c = visual_contribution(&m, &t, 2, t.last(), &PerturbationSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn query_before_last_visual_is_rejected() {
        let (m, t) = setup();
        let e = visual_contribution(&m, &t, 1, 3, &PerturbationSpec::default()).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }

    #[test]
    fn constant_visual_block_is_degenerate() {
        let h = Tensor::<f64>::full(&[4, 3], 0.5);
        assert!(matches!(visual_std(&h, 2), Err(Error::Degenerate(_))));
    }
}
