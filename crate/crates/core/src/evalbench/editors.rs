// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::datagen::{EditCase, ToyImage, Vocab};
use crate::error::Result;
use crate::numerics::{Scalar, Tensor};
use crate::toyvlm::ToyVlm;
use crate::vead::{compute_edit_signal, forward_with_adapter, EditSignal, VeadParams};

use super::ft::{ft_baseline, FtConfig};

/// A model with one edit applied.
pub trait EditedModel<T> {
    /// Logits of every position of `(image, tokens)`.
    fn logits(&self, image: Option<&ToyImage>, tokens: &[usize]) -> Result<Tensor<T>>;
}

/// Produces a per-case edited model. Nothing carries over between cases.
pub trait Editor<T: Scalar> {
    fn tag(&self) -> String;

    fn apply<'a>(
        &'a self,
        model: &'a ToyVlm<T>,
        vocab: &Vocab,
        case: &EditCase,
    ) -> Result<Box<dyn EditedModel<T> + 'a>>;
}

impl<T: Scalar> EditedModel<T> for ToyVlm<T> {
    fn logits(&self, image: Option<&ToyImage>, tokens: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_trace(&self.embed(image, tokens)?)?.logits)
    }
}

/// Leaves the model untouched.
pub struct NoEdit;

impl<T: Scalar> Editor<T> for NoEdit {
    fn tag(&self) -> String {
        "none".into()
    }

    fn apply<'a>(&'a self, model: &'a ToyVlm<T>, _: &Vocab, _: &EditCase) -> Result<Box<dyn EditedModel<T> + 'a>> {
        Ok(Box::new(Borrowed(model)))
    }
}

struct Borrowed<'a, T>(&'a ToyVlm<T>);

impl<T: Scalar> EditedModel<T> for Borrowed<'_, T> {
    fn logits(&self, image: Option<&ToyImage>, tokens: &[usize]) -> Result<Tensor<T>> {
        self.0.logits(image, tokens)
    }
}

/// Trained adapter driven by the case's edit signal.
pub struct VeadEditor<T> {
    pub params: VeadParams<T>,
    pub tag: String,
}

struct Adapted<'a, T> {
    model: &'a ToyVlm<T>,
    params: &'a VeadParams<T>,
    signal: EditSignal<T>,
}

impl<T: Scalar> EditedModel<T> for Adapted<'_, T> {
    fn logits(&self, image: Option<&ToyImage>, tokens: &[usize]) -> Result<Tensor<T>> {
        let emb = self.model.embed(image, tokens)?;
        Ok(forward_with_adapter(self.model, &emb, self.params, &self.signal)?.logits)
    }
}

impl<T: Scalar> Editor<T> for VeadEditor<T> {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn apply<'a>(
        &'a self,
        model: &'a ToyVlm<T>,
        vocab: &Vocab,
        case: &EditCase,
    ) -> Result<Box<dyn EditedModel<T> + 'a>> {
        let signal = compute_edit_signal(
            model,
            case.edit.image.as_ref(),
            &case.edit.prompt_ids(vocab)?,
            &case.edit.answer_ids(vocab)?,
            self.params.l_e,
            &format!("case {}", case.id),
        )?;
        Ok(Box::new(Adapted {
            model,
            params: &self.params,
            signal,
        }))
    }
}

/// Fine-tunes the last layer on each case.
pub struct FtEditor {
    pub config: FtConfig,
}

impl<T: Scalar> Editor<T> for FtEditor {
    fn tag(&self) -> String {
        "ft-l".into()
    }

    fn apply<'a>(
        &'a self,
        model: &'a ToyVlm<T>,
        vocab: &Vocab,
        case: &EditCase,
    ) -> Result<Box<dyn EditedModel<T> + 'a>> {
        let overlay = ft_baseline(model, vocab, case, &self.config)?;
        match overlay.layer {
            None => Ok(Box::new(Borrowed(model))),
            Some(layer) => {
                let mut edited = model.clone();
                let last = edited.params.layers.len() - 1;
                edited.params.layers[last] = layer;
                Ok(Box::new(edited))
            }
        }
    }
}
