// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Weights of one transformer block. Biases are `1 x width` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// All weights of the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlmParams<T> {
    /// `patch_dim x d_model`
    pub patch_proj: Tensor<T>,
    /// `grid_rows x d_model`
    pub row_embed: Tensor<T>,
    /// `grid_cols x d_model`
    pub col_embed: Tensor<T>,
    /// `vocab x d_model`
    pub token_embed: Tensor<T>,
    /// `max_text_len x d_model`
    pub text_pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `d_model x vocab`, the logit map.
    pub unembed: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f, s) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        let so = s / (2.0 * cfg.layers as f64).sqrt();
        Self {
            wq: Tensor::randn(&[d, d], s, rng),
            bq: Tensor::zeros(&[1, d]),
            wk: Tensor::randn(&[d, d], s, rng),
            bk: Tensor::zeros(&[1, d]),
            wv: Tensor::randn(&[d, d], s, rng),
            bv: Tensor::zeros(&[1, d]),
            wo: Tensor::randn(&[d, d], so, rng),
            bo: Tensor::zeros(&[1, d]),
            w1: Tensor::randn(&[d, f], s, rng),
            b1: Tensor::zeros(&[1, f]),
            w2: Tensor::randn(&[f, d], so, rng),
            b2: Tensor::zeros(&[1, d]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl<T: Scalar> ToyVlmParams<T> {
    /// Gaussian weights, depth-scaled output projections, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, s) = (cfg.d_model, cfg.init_std);
        let patch_proj = Tensor::randn(&[cfg.patch_dim, d], s, &mut rng);
        let row_embed = Tensor::randn(&[cfg.grid_rows, d], s, &mut rng);
        let col_embed = Tensor::randn(&[cfg.grid_cols, d], s, &mut rng);
        let token_embed = Tensor::randn(&[cfg.vocab_size, d], s, &mut rng);
        let text_pos = Tensor::randn(&[cfg.max_text_len, d], s, &mut rng);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(cfg, &mut rng)).collect();
        let unembed = Tensor::randn(&[d, cfg.vocab_size], s, &mut rng);
        Self {
            patch_proj,
            row_embed,
            col_embed,
            token_embed,
            text_pos,
            layers,
            unembed,
        }
    }

    /// Tensors in canonical (checkpoint) order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("row_embed".to_string(), &self.row_embed),
            ("col_embed".to_string(), &self.col_embed),
            ("token_embed".to_string(), &self.token_embed),
            ("text_pos".to_string(), &self.text_pos),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, t) in layer.named() {
                out.push((format!("layers.{}.{n}", i + 1), t));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("patch_proj".to_string(), &mut self.patch_proj),
            ("row_embed".to_string(), &mut self.row_embed),
            ("col_embed".to_string(), &mut self.col_embed),
            ("token_embed".to_string(), &mut self.token_embed),
            ("text_pos".to_string(), &mut self.text_pos),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer.named_mut() {
                out.push((format!("layers.{}.{n}", i + 1), t));
            }
        }
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ToyVlmParams::<T>::zeros_like(cfg);
        let ours = self.named();
        let want = reference.named();
        if ours.len() != want.len() {
            return Err(Error::Shape(format!(
                "{} tensors, config implies {}",
                ours.len(),
                want.len()
            )));
        }
        for ((n, t), (_, w)) in ours.iter().zip(&want) {
            if t.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "{n}: shape {:?}, expected {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(cfg, 0);
        for (_, t) in p.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        p
    }

    pub fn cast<U: Scalar>(&self) -> ToyVlmParams<U> {
        let layer = |l: &LayerParams<T>| LayerParams {
            wq: l.wq.cast(),
            bq: l.bq.cast(),
            wk: l.wk.cast(),
            bk: l.bk.cast(),
            wv: l.wv.cast(),
            bv: l.bv.cast(),
            wo: l.wo.cast(),
            bo: l.bo.cast(),
            w1: l.w1.cast(),
            b1: l.b1.cast(),
            w2: l.w2.cast(),
            b2: l.b2.cast(),
        };
        ToyVlmParams {
            patch_proj: self.patch_proj.cast(),
            row_embed: self.row_embed.cast(),
            col_embed: self.col_embed.cast(),
            token_embed: self.token_embed.cast(),
            text_pos: self.text_pos.cast(),
            layers: self.layers.iter().map(layer).collect(),
            unembed: self.unembed.cast(),
        }
    }
}
