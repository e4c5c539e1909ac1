// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::ToyVlmParams;
use crate::datagen::{BaseAnswerer, ToyImage};
use crate::error::{Error, Result};
use crate::numerics::kernels::{attend_row, attention_forward, gelu_scalar};
use crate::numerics::{AttnLayout, Scalar, Tensor};

/// Input rows of the transformer: visual rows first, then text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub rows: Tensor<T>,
    pub n_visual: usize,
}

impl<T: Scalar> Embedding<T> {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_text(&self) -> usize {
        self.len() - self.n_visual
    }
}

/// Query/key/value projections of one layer input, kept for surgical
/// re-computation of single attention outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbe<T> {
    pub layer: usize,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Scalar> AttentionProbe<T> {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a forward pass produced.
///
/// Layers are numbered `1..=L`; `h(0)` is the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<T> {
    pub n_visual: usize,
    h: Vec<Tensor<T>>,
    a: Vec<Tensor<T>>,
    m: Vec<Tensor<T>>,
    probes: Vec<AttentionProbe<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> HiddenTrace<T> {
    pub fn layers(&self) -> usize {
        self.a.len()
    }

    pub fn len(&self) -> usize {
        self.h[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hidden state after layer `l` (`l = 0` is the embedding).
    pub fn h(&self, l: usize) -> &Tensor<T> {
        &self.h[l]
    }

    /// Attention output of layer `l >= 1`.
    pub fn a(&self, l: usize) -> &Tensor<T> {
        &self.a[l - 1]
    }

    /// MLP output of layer `l >= 1`.
    pub fn m(&self, l: usize) -> &Tensor<T> {
        &self.m[l - 1]
    }

    pub fn last(&self) -> usize {
        self.len() - 1
    }

    /// Cached projections of the layer-`l` attention input.
    pub fn probe(&self, l: usize) -> &AttentionProbe<T> {
        &self.probes[l - 1]
    }
}

/// A hook that may rewrite the hidden state after a given layer.
pub trait LayerHook<T> {
    /// Layer whose output is rewritten (`0` rewrites the embedding).
    fn layer(&self) -> usize;
    fn apply(&self, h: &Tensor<T>, n_visual: usize) -> Result<Tensor<T>>;
}

/// The toy vision-language transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm<T> {
    pub config: ModelConfig,
    pub params: ToyVlmParams<T>,
}

fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    x.matmul(w)
        .and_then(|y| y.add_row(b))
        .expect("affine shapes fixed by the model config")
}

impl<T: Scalar> ToyVlm<T> {
    pub fn new(config: ModelConfig, params: ToyVlmParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    /// Fresh model with every weight drawn from `N(0, init_std²)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ToyVlmParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> ToyVlm<U> {
        ToyVlm {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Patch features `N_v x patch_dim` for an image on this model's grid.
    pub fn image_features(&self, image: &ToyImage) -> Result<Tensor<T>> {
        image.check_grid(self.config.grid_rows, self.config.grid_cols)?;
        let f = image.render::<T>();
        if f.cols() != self.config.patch_dim {
            return Err(Error::Shape(format!(
                "patch width {} != config patch_dim {}",
                f.cols(),
                self.config.patch_dim
            )));
        }
        Ok(f)
    }

    /// Embeds pre-rendered patch features and token ids.
    pub fn embed_features(&self, features: Option<&Tensor<T>>, tokens: &[usize]) -> Result<Embedding<T>> {
        let cfg = &self.config;
        let p = &self.params;
        if tokens.len() > cfg.max_text_len {
            return Err(Error::Contract(format!(
                "{} tokens exceed max_text_len {}",
                tokens.len(),
                cfg.max_text_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary")));
        }
        let d = cfg.d_model;
        let n_visual = match features {
            Some(f) => {
                if f.rows() != cfg.n_visual() || f.cols() != cfg.patch_dim {
                    return Err(Error::Shape(format!(
                        "patch features {:?}, expected [{}, {}]",
                        f.shape(),
                        cfg.n_visual(),
                        cfg.patch_dim
                    )));
                }
                cfg.n_visual()
            }
            None => 0,
        };
        let n = n_visual + tokens.len();
        if n == 0 {
            return Err(Error::Contract("empty input sequence".into()));
        }
        let mut rows = Tensor::zeros(&[n, d]);
        if let Some(f) = features {
            let vis = f.matmul(&p.patch_proj)?;
            for i in 0..n_visual {
                let (r, c) = (i / cfg.grid_cols, i % cfg.grid_cols);
                let dst = rows.row_mut(i);
                for j in 0..d {
                    dst[j] = vis.row(i)[j] + (p.row_embed.row(r)[j] + p.col_embed.row(c)[j]);
                }
            }
        }
        for (t, &id) in tokens.iter().enumerate() {
            let dst = rows.row_mut(n_visual + t);
            for j in 0..d {
                dst[j] = p.token_embed.row(id)[j] + p.text_pos.row(t)[j];
            }
        }
        Ok(Embedding { rows, n_visual })
    }

    pub fn embed(&self, image: Option<&ToyImage>, tokens: &[usize]) -> Result<Embedding<T>> {
        let f = image.map(|img| self.image_features(img)).transpose()?;
        self.embed_features(f.as_ref(), tokens)
    }

    fn layer_forward(&self, l: usize, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>, AttentionProbe<T>) {
        let lp = &self.params.layers[l - 1];
        let layout = AttnLayout::single(self.config.heads, x.rows());
        let q = affine(x, &lp.wq, &lp.bq);
        let k = affine(x, &lp.wk, &lp.bk);
        let v = affine(x, &lp.wv, &lp.bv);
        let (ctx, _) = attention_forward(&q, &k, &v, &layout, false);
        let a = affine(&ctx, &lp.wo, &lp.bo);
        let u = x.add(&a).expect("residual shapes");
        let z = affine(&u, &lp.w1, &lp.b1).map(gelu_scalar);
        let m = affine(&z, &lp.w2, &lp.b2);
        let h = u.add(&m).expect("residual shapes");
        (h, a, m, AttentionProbe { layer: l, q, k, v })
    }

    /// Full forward pass recording `h`, `a`, `m` for every layer.
    pub fn forward_trace(&self, emb: &Embedding<T>) -> Result<HiddenTrace<T>> {
        self.forward_hooked(emb, None)
    }

    /// Forward pass where `hook` may rewrite the hidden state after one layer.
    pub fn forward_hooked(&self, emb: &Embedding<T>, hook: Option<&dyn LayerHook<T>>) -> Result<HiddenTrace<T>> {
        if emb.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if emb.rows.cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "embedding width {} != d_model {}",
                emb.rows.cols(),
                self.config.d_model
            )));
        }
        if let Some(hk) = hook {
            if hk.layer() > self.config.layers {
                return Err(Error::Index(format!("hook layer {} > L", hk.layer())));
            }
        }
        let layers = self.config.layers;
        let mut h = Vec::with_capacity(layers + 1);
        let mut a = Vec::with_capacity(layers);
        let mut m = Vec::with_capacity(layers);
        let mut probes = Vec::with_capacity(layers);
        let mut x = emb.rows.clone();
        for l in 0..=layers {
            if l > 0 {
                let (hn, al, ml, c) = self.layer_forward(l, h.last().unwrap());
                a.push(al);
                m.push(ml);
                probes.push(c);
                x = hn;
            }
            if let Some(hk) = hook.filter(|hk| hk.layer() == l) {
                x = hk.apply(&x, emb.n_visual)?;
            }
            h.push(std::mem::replace(&mut x, Tensor::scalar(T::zero())));
        }
        let logits = h[layers].matmul(&self.params.unembed)?;
        Ok(HiddenTrace {
            n_visual: emb.n_visual,
            h,
            a,
            m,
            probes,
            logits,
        })
    }

    /// Re-evaluates the layer-`l` attention output at `query` with some
    /// layer-`(l-1)` hidden rows replaced. The trace is left untouched.
    pub fn recompute_attention(
        &self,
        trace: &HiddenTrace<T>,
        l: usize,
        overrides: &BTreeMap<usize, Vec<T>>,
        query: usize,
    ) -> Result<Vec<T>> {
        self.check_layer(l)?;
        self.probe_attention(trace.probe(l), overrides, query)
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        let layers = self.config.layers;
        if l == 0 || l > layers {
            return Err(Error::Index(format!("layer {l} outside 1..={layers}")));
        }
        Ok(())
    }

    /// Projections of an arbitrary layer-`(l-1)` hidden state for layer `l`.
    pub fn attention_probe(&self, l: usize, h_prev: &Tensor<T>) -> Result<AttentionProbe<T>> {
        self.check_layer(l)?;
        if h_prev.cols() != self.config.d_model {
            return Err(Error::Shape(format!("hidden width {} != d_model", h_prev.cols())));
        }
        let lp = &self.params.layers[l - 1];
        Ok(AttentionProbe {
            layer: l,
            q: affine(h_prev, &lp.wq, &lp.bq),
            k: affine(h_prev, &lp.wk, &lp.bk),
            v: affine(h_prev, &lp.wv, &lp.bv),
        })
    }

    /// Attention output at `query` from a probe, with some input rows replaced.
    pub fn probe_attention(
        &self,
        probe: &AttentionProbe<T>,
        overrides: &BTreeMap<usize, Vec<T>>,
        query: usize,
    ) -> Result<Vec<T>> {
        if query >= probe.len() {
            return Err(Error::Index(format!("query position {query} >= {}", probe.len())));
        }
        let d = self.config.d_model;
        for (&pos, row) in overrides {
            if pos > query {
                return Err(Error::Contract(format!(
                    "override at position {pos} after query {query} cannot affect it"
                )));
            }
            if row.len() != d {
                return Err(Error::Shape(format!("override width {} != {d}", row.len())));
            }
        }
        let lp = &self.params.layers[probe.layer - 1];
        let span = query + 1;
        let mut keys = probe.k.data()[..span * d].to_vec();
        let mut values = probe.v.data()[..span * d].to_vec();
        let mut q = probe.q.row(query).to_vec();
        for (&pos, row) in overrides {
            let x = Tensor::row_vector(row.clone());
            keys[pos * d..(pos + 1) * d].copy_from_slice(affine(&x, &lp.wk, &lp.bk).data());
            values[pos * d..(pos + 1) * d].copy_from_slice(affine(&x, &lp.wv, &lp.bv).data());
            if pos == query {
                q = affine(&x, &lp.wq, &lp.bq).into_data();
            }
        }
        let mut ctx = vec![T::zero(); d];
        attend_row(&q, &keys, &values, d, self.config.heads, 0, query, &mut ctx, None);
        Ok(affine(&Tensor::row_vector(ctx), &lp.wo, &lp.bo).into_data())
    }

    /// Greedy decoding with ties broken toward the lowest id. The
    /// end-of-sequence token is not included in the output.
    pub fn greedy_decode(
        &self,
        image: Option<&ToyImage>,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(Error::Contract("max_new must be >= 1".into()));
        }
        let feats = image.map(|img| self.image_features(img)).transpose()?;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_text_len {
                break;
            }
            let emb = self.embed_features(feats.as_ref(), &tokens)?;
            let trace = self.forward_trace(&emb)?;
            let next = argmax(trace.logits.row(trace.last()));
            if next == eos {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A model paired with its end-of-sequence id answers edit-case queries.
pub struct Answerer<'a, T> {
    pub model: &'a ToyVlm<T>,
    pub eos: usize,
    pub max_new: usize,
}

impl<T: Scalar> BaseAnswerer for Answerer<'_, T> {
    fn base_answer(&self, image: Option<&ToyImage>, prompt: &[usize]) -> Result<Vec<usize>> {
        self.model.greedy_decode(image, prompt, self.max_new, self.eos)
    }
}
