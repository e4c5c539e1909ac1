// SPDX-License-Identifier: MIT OR Apache-2.0

//! Differentiable forward pass on a [`DiffGraph`], over packed batches.

use super::config::ModelConfig;
use super::params::{LayerParams, ToyVlmParams};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, DiffGraph, Scalar, Tensor, Var};

/// Graph handles of one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LayerVars {
    /// Handles in the order of [`LayerParams::named`].
    pub fn ordered(&self) -> [Var; 12] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// Graph handles of every model weight.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch_proj: Var,
    pub row_embed: Var,
    pub col_embed: Var,
    pub token_embed: Var,
    pub text_pos: Var,
    pub layers: Vec<LayerVars>,
    pub unembed: Var,
}

fn leaf<T: Scalar>(g: &mut DiffGraph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

impl<T: Scalar> LayerParams<T> {
    pub fn to_graph(&self, g: &mut DiffGraph<T>, trainable: bool) -> LayerVars {
        LayerVars {
            wq: leaf(g, &self.wq, trainable),
            bq: leaf(g, &self.bq, trainable),
            wk: leaf(g, &self.wk, trainable),
            bk: leaf(g, &self.bk, trainable),
            wv: leaf(g, &self.wv, trainable),
            bv: leaf(g, &self.bv, trainable),
            wo: leaf(g, &self.wo, trainable),
            bo: leaf(g, &self.bo, trainable),
            w1: leaf(g, &self.w1, trainable),
            b1: leaf(g, &self.b1, trainable),
            w2: leaf(g, &self.w2, trainable),
            b2: leaf(g, &self.b2, trainable),
        }
    }
}

impl<T: Scalar> ToyVlmParams<T> {
    /// Registers every weight, in the canonical order of [`ToyVlmParams::named`].
    pub fn to_graph(&self, g: &mut DiffGraph<T>, trainable: bool) -> ModelVars {
        ModelVars {
            patch_proj: leaf(g, &self.patch_proj, trainable),
            row_embed: leaf(g, &self.row_embed, trainable),
            col_embed: leaf(g, &self.col_embed, trainable),
            token_embed: leaf(g, &self.token_embed, trainable),
            text_pos: leaf(g, &self.text_pos, trainable),
            layers: self.layers.iter().map(|l| l.to_graph(g, trainable)).collect(),
            unembed: leaf(g, &self.unembed, trainable),
        }
    }
}

impl ModelVars {
    /// Handles in the canonical order of [`ToyVlmParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![
            self.patch_proj,
            self.row_embed,
            self.col_embed,
            self.token_embed,
            self.text_pos,
        ];
        for l in &self.layers {
            out.extend(l.ordered());
        }
        out.push(self.unembed);
        out
    }
}

fn affine<T: Scalar>(g: &mut DiffGraph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// One transformer block; returns the next hidden state.
pub fn layer_graph<T: Scalar>(g: &mut DiffGraph<T>, lv: &LayerVars, x: Var, layout: &AttnLayout) -> Var {
    let q = affine(g, x, lv.wq, lv.bq);
    let k = affine(g, x, lv.wk, lv.bk);
    let v = affine(g, x, lv.wv, lv.bv);
    let ctx = g.attention(q, k, v, layout.clone());
    let a = affine(g, ctx, lv.wo, lv.bo);
    let u = g.add(x, a);
    let z = affine(g, u, lv.w1, lv.b1);
    let z = g.gelu(z);
    let m = affine(g, z, lv.w2, lv.b2);
    g.add(u, m)
}

/// One sequence of a packed batch.
#[derive(Debug, Clone)]
pub struct SeqInput<'a, T> {
    /// Patch features `N_v x patch_dim`, absent for text-only input.
    pub features: Option<&'a Tensor<T>>,
    pub tokens: &'a [usize],
}

/// Row offsets of each packed sequence.
#[derive(Debug, Clone)]
pub struct Packing {
    pub layout: AttnLayout,
    /// `(start, n_visual)` per sequence.
    pub seqs: Vec<(usize, usize)>,
}

impl Packing {
    pub fn rows(&self) -> usize {
        self.layout.rows()
    }
}

/// Embeds a packed batch. Each sequence occupies a contiguous row block.
pub fn embed_graph<T: Scalar>(
    g: &mut DiffGraph<T>,
    cfg: &ModelConfig,
    mv: &ModelVars,
    batch: &[SeqInput<'_, T>],
) -> Result<(Var, Packing)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut feats: Vec<&Tensor<T>> = Vec::new();
    let (mut grid_r, mut grid_c) = (Vec::new(), Vec::new());
    let (mut tok, mut pos) = (Vec::new(), Vec::new());
    // Final row r takes row `order[r]` of [visual rows; text rows].
    let mut vis_slots = Vec::new();
    let mut txt_slots = Vec::new();
    let mut segments = Vec::new();
    let mut seqs = Vec::new();
    let mut start = 0;
    for s in batch {
        if s.tokens.len() > cfg.max_text_len {
            return Err(Error::Contract(format!(
                "{} tokens exceed max_text_len {}",
                s.tokens.len(),
                cfg.max_text_len
            )));
        }
        let nv = match s.features {
            Some(f) => {
                if f.rows() != cfg.n_visual() || f.cols() != cfg.patch_dim {
                    return Err(Error::Shape(format!("patch features {:?}", f.shape())));
                }
                feats.push(f);
                cfg.n_visual()
            }
            None => 0,
        };
        for i in 0..nv {
            grid_r.push(i / cfg.grid_cols);
            grid_c.push(i % cfg.grid_cols);
            vis_slots.push(start + i);
        }
        for (t, &id) in s.tokens.iter().enumerate() {
            if id >= cfg.vocab_size {
                return Err(Error::Index(format!("token id {id} outside vocabulary")));
            }
            tok.push(id);
            pos.push(t);
            txt_slots.push(start + nv + t);
        }
        let len = nv + s.tokens.len();
        if len == 0 {
            return Err(Error::Contract("empty sequence in batch".into()));
        }
        segments.push((start, len));
        seqs.push((start, nv));
        start += len;
    }
    let mut parts = Vec::new();
    if !feats.is_empty() {
        let f = Tensor::concat_rows(&feats)?;
        let f = g.constant(f);
        let vis = g.matmul(f, mv.patch_proj);
        let re = g.gather_rows(mv.row_embed, &grid_r);
        let ce = g.gather_rows(mv.col_embed, &grid_c);
        let pe = g.add(re, ce);
        parts.push(g.add(vis, pe));
    }
    if !tok.is_empty() {
        let te = g.gather_rows(mv.token_embed, &tok);
        let pe = g.gather_rows(mv.text_pos, &pos);
        parts.push(g.add(te, pe));
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    };
    let mut order = vec![0; start];
    for (i, &r) in vis_slots.iter().chain(&txt_slots).enumerate() {
        order[r] = i;
    }
    let rows = if order.iter().enumerate().all(|(i, &o)| i == o) {
        stacked
    } else {
        g.gather_rows(stacked, &order)
    };
    let layout = AttnLayout {
        heads: cfg.heads,
        segments,
    };
    Ok((rows, Packing { layout, seqs }))
}

/// Runs `layers` in order on hidden rows `x`.
pub fn layers_graph<T: Scalar>(g: &mut DiffGraph<T>, layers: &[LayerVars], x: Var, layout: &AttnLayout) -> Var {
    layers.iter().fold(x, |h, lv| layer_graph(g, lv, h, layout))
}

/// Mean next-token NLL at the given `(row, target)` pairs of the final hidden rows.
pub fn nll_at_rows<T: Scalar>(g: &mut DiffGraph<T>, h_final: Var, unembed: Var, targets: &[(usize, usize)]) -> Var {
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let hs = g.gather_rows(h_final, &rows);
    let logits = g.matmul(hs, unembed);
    let lp = g.log_softmax_rows(logits);
    let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, t)| (i, t.1)).collect();
    let picked = g.pick(lp, &idx);
    let mean = g.mean(picked);
    g.scale(mean, -T::one())
}

#[cfg(test)]
mod tests {
    use super::super::model::ToyVlm;
    use super::*;
    use crate::datagen::{random_scene, substream, Color, Shape};

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            grid_rows: 2,
            grid_cols: 2,
            vocab_size: 9,
            max_text_len: 5,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn packed_graph_matches_inference_forward() {
        let m = ToyVlm::<f64>::init(small(), 4).unwrap();
        let mut rng = substream(1, 0);
        let img = random_scene(&mut rng, 2, 2, &Shape::ALL, &Color::ALL, None, None).image;
        let f = m.image_features(&img).unwrap();
        let t1 = [1usize, 2, 3];
        let t2 = [4usize, 5];
        let batch = [
            SeqInput {
                features: Some(&f),
                tokens: &t1,
            },
            SeqInput {
                features: None,
                tokens: &t2,
            },
            SeqInput {
                features: Some(&f),
                tokens: &t2,
            },
        ];
        let mut g = DiffGraph::new();
        let mv = m.params.to_graph(&mut g, false);
        let (x, pack) = embed_graph(&mut g, &m.config, &mv, &batch).unwrap();
        let h = layers_graph(&mut g, &mv.layers, x, &pack.layout);
        let logits = g.matmul(h, mv.unembed);
        let got = g.value(logits).clone();
        let mut r = 0;
        for s in &batch {
            let e = m.embed_features(s.features, s.tokens).unwrap();
            let t = m.forward_trace(&e).unwrap();
            for i in 0..t.len() {
                for (a, b) in t.logits.row(i).iter().zip(got.row(r + i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            r += t.len();
        }
        assert_eq!(r, got.rows());
    }

    #[test]
    fn nll_of_uniform_logits_is_log_vocab() {
        let mut g = DiffGraph::<f64>::new();
        let h = g.constant(Tensor::zeros(&[3, 4]));
        let w = g.constant(Tensor::zeros(&[4, 8]));
        let l = nll_at_rows(&mut g, h, w, &[(0, 1), (2, 7)]);
        assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-12);
    }
}

#[cfg(test)]
mod grad_tests {
    use super::super::model::ToyVlm;
    use super::*;
    use crate::datagen::{random_scene, substream, Color, Shape};
    use crate::numerics::{grad_check, Sampling};

    #[test]
    fn packed_nll_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 6,
            grid_rows: 2,
            grid_cols: 2,
            vocab_size: 7,
            max_text_len: 4,
            init_std: 0.5,
            ..ModelConfig::default()
        };
        let m = ToyVlm::<f64>::init(cfg.clone(), 11).unwrap();
        let mut rng = substream(2, 0);
        let img = random_scene(&mut rng, 2, 2, &Shape::ALL, &Color::ALL, None, None).image;
        let f = m.image_features(&img).unwrap();
        let (t1, t2) = ([1usize, 2, 3], [4usize, 5]);
        let batch = [
            SeqInput {
                features: Some(&f),
                tokens: &t1,
            },
            SeqInput {
                features: None,
                tokens: &t2,
            },
        ];
        let mut g = DiffGraph::new();
        let mv = m.params.to_graph(&mut g, true);
        let (x, pack) = embed_graph(&mut g, &cfg, &mv, &batch).unwrap();
        let h = layers_graph(&mut g, &mv.layers, x, &pack.layout);
        let loss = nll_at_rows(&mut g, h, mv.unembed, &[(4, 2), (5, 6), (6, 3), (8, 1)]);
        let report = grad_check(&mut g, loss, 1e-5, 1e-6, Sampling::All).unwrap();
        assert!(report.all_pass(), "max error {}", report.max_error());
    }
}
