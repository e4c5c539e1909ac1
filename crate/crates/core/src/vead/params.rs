// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::toyvlm::checkpoint::{fill_named, read_checkpoint, write_checkpoint};
use crate::toyvlm::ModelConfig;

/// Two-layer ReLU MLP `d_h -> d_a -> d_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Adapter weights and structural switches.
#[derive(Debug, Clone, PartialEq)]
pub struct VeadParams<T> {
    /// Insertion layer: the adapter rewrites the output of this layer.
    pub l_e: usize,
    pub d_a: usize,
    /// Query projection `d_h x d_a`.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// Key projection `d_h x d_a`.
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    /// Value projection `d_h x d_h`, zero at init.
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
    /// Influence-mapper branch over visual states.
    pub mu1: Mlp2<T>,
    /// Influence-mapper branch over the last edit-prompt state.
    pub mu2: Mlp2<T>,
    /// Force every intensity to 1.
    pub drop_im: bool,
    /// Force the cross-attention output to 0.
    pub drop_ca: bool,
}

impl<T: Scalar> Mlp2<T> {
    fn init(d: usize, a: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Tensor::randn(&[d, a], INIT_STD, rng),
            b1: Tensor::zeros(&[1, a]),
            w2: Tensor::randn(&[a, a], INIT_STD, rng),
            b2: Tensor::zeros(&[1, a]),
        }
    }

    /// `relu(x W1 + b1) W2 + b2`
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let z = x
            .matmul(&self.w1)
            .and_then(|z| z.add_row(&self.b1))
            .expect("mlp shapes");
        let z = z.map(|v| v.max(T::zero()));
        z.matmul(&self.w2)
            .and_then(|y| y.add_row(&self.b2))
            .expect("mlp shapes")
    }
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> VeadParams<T> {
    /// Gaussian projections and mapper weights; value projection and biases zero.
    pub fn init(config: &ModelConfig, l_e: usize, d_a: usize, seed: u64) -> Result<Self> {
        if l_e == 0 || l_e > config.layers {
            return Err(Error::Contract(format!(
                "insertion layer {l_e} outside 1..={}",
                config.layers
            )));
        }
        if d_a == 0 {
            return Err(Error::Contract("adapter width must be >= 1".into()));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            l_e,
            d_a,
            w1: Tensor::randn(&[d, d_a], INIT_STD, &mut rng),
            b1: Tensor::zeros(&[1, d_a]),
            w2: Tensor::randn(&[d, d_a], INIT_STD, &mut rng),
            b2: Tensor::zeros(&[1, d_a]),
            w3: Tensor::zeros(&[d, d]),
            b3: Tensor::zeros(&[1, d]),
            mu1: Mlp2::init(d, d_a, &mut rng),
            mu2: Mlp2::init(d, d_a, &mut rng),
            drop_im: false,
            drop_ca: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w3.rows()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
        ];
        for (p, m) in [("mu1", &self.mu1), ("mu2", &self.mu2)] {
            out.push((format!("{p}.w1"), &m.w1));
            out.push((format!("{p}.b1"), &m.b1));
            out.push((format!("{p}.w2"), &m.w2));
            out.push((format!("{p}.b2"), &m.b2));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
            ("w3".into(), &mut self.w3),
            ("b3".into(), &mut self.b3),
        ];
        for (p, m) in [("mu1", &mut self.mu1), ("mu2", &mut self.mu2)] {
            out.push((format!("{p}.w1"), &mut m.w1));
            out.push((format!("{p}.b1"), &mut m.b1));
            out.push((format!("{p}.w2"), &mut m.w2));
            out.push((format!("{p}.b2"), &mut m.b2));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> VeadParams<U> {
        let mlp = |m: &Mlp2<T>| Mlp2 {
            w1: m.w1.cast(),
            b1: m.b1.cast(),
            w2: m.w2.cast(),
            b2: m.b2.cast(),
        };
        VeadParams {
            l_e: self.l_e,
            d_a: self.d_a,
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            w3: self.w3.cast(),
            b3: self.b3.cast(),
            mu1: mlp(&self.mu1),
            mu2: mlp(&self.mu2),
            drop_im: self.drop_im,
            drop_ca: self.drop_ca,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = vec![
            ("kind".to_string(), "vead".to_string()),
            ("l_e".to_string(), self.l_e.to_string()),
            ("d_a".to_string(), self.d_a.to_string()),
            ("d_model".to_string(), self.d_model().to_string()),
            ("drop_im".to_string(), self.drop_im.to_string()),
            ("drop_ca".to_string(), self.drop_ca.to_string()),
        ];
        write_checkpoint(path, &meta, &self.named())
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.get("kind")? != "vead" {
            return Err(Error::Format {
                path: path.into(),
                msg: "not an adapter checkpoint".into(),
            });
        }
        let d_model: usize = ck.parse("d_model")?;
        if d_model != config.d_model {
            return Err(Error::Shape(format!(
                "adapter width {d_model} != model d_model {}",
                config.d_model
            )));
        }
        let mut p = Self::init(config, ck.parse("l_e")?, ck.parse("d_a")?, 0)?;
        p.drop_im = ck.parse("drop_im")?;
        p.drop_ca = ck.parse("drop_ca")?;
        fill_named(path, p.named_mut(), &ck.tensors)?;
        Ok(p)
    }
}
