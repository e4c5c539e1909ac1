// SPDX-License-Identifier: MIT OR Apache-2.0

use super::params::VeadParams;
use crate::datagen::ToyImage;
use crate::error::{Error, Result};
use crate::numerics::kernels::{sigmoid_scalar, softmax_in_place};
use crate::numerics::{Scalar, Tensor};
use crate::toyvlm::{Embedding, HiddenTrace, LayerHook, ToyVlm};

/// Layer-`l_e` hidden states of an edit sample `(image, prompt ⊕ answer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSignal<T> {
    /// `(N_v + N_t + N_o) x d_h`
    pub hbar: Tensor<T>,
    /// Row of the last edit-prompt token (0-based).
    pub n_vt: usize,
    pub n_visual: usize,
    pub layer: usize,
    pub source: String,
}

/// Captures the edit signal with no adapter active.
pub fn compute_edit_signal<T: Scalar>(
    model: &ToyVlm<T>,
    image: Option<&ToyImage>,
    prompt: &[usize],
    answer: &[usize],
    l_e: usize,
    source: &str,
) -> Result<EditSignal<T>> {
    if answer.is_empty() {
        return Err(Error::Contract("edit signal needs a nonempty answer".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("edit signal needs a nonempty prompt".into()));
    }
    if l_e == 0 || l_e > model.config.layers {
        return Err(Error::Index(format!(
            "signal layer {l_e} outside 1..={}",
            model.config.layers
        )));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(answer);
    let emb = model.embed(image, &tokens)?;
    let trace = model.forward_trace(&emb)?;
    Ok(EditSignal {
        hbar: trace.h(l_e).clone(),
        n_vt: emb.n_visual + prompt.len() - 1,
        n_visual: emb.n_visual,
        layer: l_e,
        source: source.to_string(),
    })
}

fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add_row(b)
}

fn check<T: Scalar>(vead: &VeadParams<T>, h_v: &Tensor<T>, signal: &EditSignal<T>) -> Result<()> {
    let d = vead.d_model();
    if h_v.cols() != d || signal.hbar.cols() != d {
        return Err(Error::Shape(format!(
            "hidden widths {} / {} do not match adapter width {d}",
            h_v.cols(),
            signal.hbar.cols()
        )));
    }
    if signal.n_vt >= signal.hbar.rows() {
        return Err(Error::Contract("signal prompt index outside the signal".into()));
    }
    Ok(())
}

/// Single-head scaled cross-attention from visual states to the edit signal.
pub fn cross_attend<T: Scalar>(vead: &VeadParams<T>, h_v: &Tensor<T>, signal: &EditSignal<T>) -> Result<Tensor<T>> {
    check(vead, h_v, signal)?;
    let q = affine(h_v, &vead.w1, &vead.b1)?;
    let k = affine(&signal.hbar, &vead.w2, &vead.b2)?;
    let v = affine(&signal.hbar, &vead.w3, &vead.b3)?;
    let mut s = q.matmul_t(&k)?.scale(T::one() / T::from_usize_lossy(vead.d_a).sqrt());
    for r in 0..s.rows() {
        softmax_in_place(s.row_mut(r));
    }
    s.matmul(&v)
}

/// Influence-mapper logits and intensities, one per visual row.
pub fn im_intensity<T: Scalar>(
    vead: &VeadParams<T>,
    h_v: &Tensor<T>,
    signal: &EditSignal<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    check(vead, h_v, signal)?;
    let f1 = vead.mu1.forward(h_v);
    let last = Tensor::row_vector(signal.hbar.row(signal.n_vt).to_vec());
    let f2 = vead.mu2.forward(&last);
    let logits = f2.matmul_t(&f1)?.into_data();
    let c = logits.iter().map(|&x| sigmoid_scalar(x)).collect();
    Ok((logits, c))
}

/// `h_v + c ⊙ ḣ` with one intensity per row.
pub fn adapt<T: Scalar>(h_v: &Tensor<T>, h_dot: &Tensor<T>, c: &[T]) -> Result<Tensor<T>> {
    h_v.same_shape(h_dot)?;
    if c.len() != h_v.rows() {
        return Err(Error::Shape(format!("{} intensities for {} rows", c.len(), h_v.rows())));
    }
    let mut out = h_v.clone();
    for r in 0..out.rows() {
        let (src, f) = (h_dot.row(r), c[r]);
        out.row_mut(r).iter_mut().zip(src).for_each(|(o, &d)| *o += f * d);
    }
    Ok(out)
}

/// Adapted visual rows of a layer-`l_e` state, honoring the ablation switches.
pub fn adapted_visual<T: Scalar>(vead: &VeadParams<T>, h_v: &Tensor<T>, signal: &EditSignal<T>) -> Result<Tensor<T>> {
    if vead.drop_ca {
        check(vead, h_v, signal)?;
        return Ok(h_v.clone());
    }
    let h_dot = cross_attend(vead, h_v, signal)?;
    let c = if vead.drop_im {
        vec![T::one(); h_v.rows()]
    } else {
        im_intensity(vead, h_v, signal)?.1
    };
    adapt(h_v, &h_dot, &c)
}

/// Hook splicing adapted visual rows into the layer-`l_e` output.
pub struct AdapterHook<'a, T> {
    pub vead: &'a VeadParams<T>,
    pub signal: &'a EditSignal<T>,
}

impl<T: Scalar> LayerHook<T> for AdapterHook<'_, T> {
    fn layer(&self) -> usize {
        self.vead.l_e
    }

    fn apply(&self, h: &Tensor<T>, n_visual: usize) -> Result<Tensor<T>> {
        if n_visual == 0 {
            return Ok(h.clone());
        }
        let hv = h.slice_rows(0, n_visual);
        let new = adapted_visual(self.vead, &hv, self.signal)?;
        let mut out = h.clone();
        out.set_rows(0, &new);
        Ok(out)
    }
}

/// Forward pass with the adapter rewriting visual rows after layer `l_e`.
pub fn forward_with_adapter<T: Scalar>(
    model: &ToyVlm<T>,
    emb: &Embedding<T>,
    vead: &VeadParams<T>,
    signal: &EditSignal<T>,
) -> Result<HiddenTrace<T>> {
    if vead.l_e == 0 || vead.l_e > model.config.layers {
        return Err(Error::Contract(format!(
            "insertion layer {} outside the model",
            vead.l_e
        )));
    }
    if signal.hbar.cols() != model.config.d_model {
        return Err(Error::Shape(format!(
            "signal width {} != d_model {}",
            signal.hbar.cols(),
            model.config.d_model
        )));
    }
    let hook = AdapterHook { vead, signal };
    model.forward_hooked(emb, Some(&hook))
}
