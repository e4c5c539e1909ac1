// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token pretraining of the base model on synthetic question answering.

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::datagen::{gen_vqa_set, pretrain_sample, text_questions, QaSample, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{DiffGraph, Scalar, Tensor};
use crate::toyvlm::diff::{embed_graph, layers_graph, nll_at_rows, SeqInput};
use crate::toyvlm::{argmax, ModelConfig, ToyVlm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    pub eval_every: usize,
    pub heldout: usize,
    /// Stop once held-out answer accuracy reaches this value.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            max_steps: 12000,
            batch: 16,
            lr: 1e-3,
            warmup: 200,
            clip: 1.0,
            eval_every: 500,
            heldout: 400,
            target_accuracy: 0.995,
        }
    }
}

/// One logged pretraining step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Teacher-forced answer-token accuracy on held-out visual questions.
    pub heldout_accuracy: f64,
    /// Same on the closed list of text-only questions.
    pub text_accuracy: f64,
    pub log: Vec<PretrainLog>,
}

/// Tokenized teacher-forcing view of a sample.
#[derive(Debug, Clone)]
pub struct TfSample<T> {
    pub features: Option<Tensor<T>>,
    /// Prompt followed by the answer (end-of-sequence not fed back).
    pub tokens: Vec<usize>,
    /// `(row within the sequence, target id)` for each answer token and the final end token.
    pub targets: Vec<(usize, usize)>,
    /// How many leading entries of `targets` are answer tokens.
    pub n_answer: usize,
}

pub fn tf_sample<T: Scalar>(model: &ToyVlm<T>, vocab: &Vocab, s: &QaSample, with_eos: bool) -> Result<TfSample<T>> {
    let prompt = s.prompt_ids(vocab)?;
    let answer = s.answer_ids(vocab)?;
    if answer.is_empty() {
        return Err(Error::Contract(format!("empty answer for `{}`", s.prompt)));
    }
    let features = s.image.as_ref().map(|img| model.image_features(img)).transpose()?;
    let nv = features.as_ref().map_or(0, |f| f.rows());
    let mut tokens = prompt.clone();
    tokens.extend(&answer);
    let first = nv + prompt.len() - 1;
    let mut targets: Vec<(usize, usize)> = answer.iter().enumerate().map(|(i, &a)| (first + i, a)).collect();
    if with_eos {
        targets.push((first + answer.len(), vocab.eos()));
    }
    Ok(TfSample {
        features,
        tokens,
        targets,
        n_answer: answer.len(),
    })
}

/// Fraction of answer tokens predicted correctly under teacher forcing.
pub fn teacher_forced_accuracy<T: Scalar>(model: &ToyVlm<T>, vocab: &Vocab, samples: &[QaSample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let tf = tf_sample(model, vocab, s, false)?;
        let trace = model.forward_trace(&model.embed_features(tf.features.as_ref(), &tf.tokens)?)?;
        for &(r, t) in &tf.targets {
            hit += (argmax(trace.logits.row(r)) == t) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Teacher-forced NLL of a packed batch; returns the loss node and its parameter handles.
fn batch_loss<T: Scalar>(
    g: &mut DiffGraph<T>,
    model: &ToyVlm<T>,
    batch: &[TfSample<T>],
) -> Result<(crate::numerics::Var, Vec<crate::numerics::Var>)> {
    let mv = model.params.to_graph(g, true);
    let inputs: Vec<SeqInput<'_, T>> = batch
        .iter()
        .map(|s| SeqInput {
            features: s.features.as_ref(),
            tokens: &s.tokens,
        })
        .collect();
    let (x, pack) = embed_graph(g, &model.config, &mv, &inputs)?;
    let h = layers_graph(g, &mv.layers, x, &pack.layout);
    let mut targets = Vec::new();
    for (s, &(start, _)) in batch.iter().zip(&pack.seqs) {
        targets.extend(s.targets.iter().map(|&(r, t)| (start + r, t)));
    }
    let loss = nll_at_rows(g, h, mv.unembed, &targets);
    Ok((loss, mv.ordered()))
}

/// Trains a fresh model until the held-out accuracy target or `max_steps`.
pub fn pretrain(
    config: &ModelConfig,
    pc: &PretrainConfig,
    vocab: &Vocab,
    mut on_log: impl FnMut(&PretrainLog),
) -> Result<(ToyVlm<f32>, PretrainReport)> {
    if pc.batch == 0 || pc.eval_every == 0 {
        return Err(Error::Contract("batch and eval_every must be >= 1".into()));
    }
    if config.vocab_size != vocab.len() {
        return Err(Error::Contract(format!(
            "config vocab_size {} != vocabulary size {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut model = ToyVlm::<f32>::init(config.clone(), pc.seed)?;
    let heldout = gen_vqa_set(pc.seed ^ 0x9e37_79b9, pc.heldout, config.grid_rows, config.grid_cols);
    let texts: Vec<QaSample> = text_questions()
        .into_iter()
        .map(|(q, a)| QaSample {
            image: None,
            prompt: q,
            answer: a,
        })
        .collect();
    let mut opt = Adam::new(pc.lr);
    let mut log = Vec::new();
    let mut last_loss = f64::NAN;
    let mut acc = 0.0;
    let mut steps = 0;
    for step in 1..=pc.max_steps {
        let batch = (0..pc.batch)
            .map(|j| {
                let s = pretrain_sample(
                    pc.seed,
                    ((step - 1) * pc.batch + j) as u64,
                    config.grid_rows,
                    config.grid_cols,
                );
                tf_sample(&model, vocab, &s, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = DiffGraph::new();
        let (loss, vars) = batch_loss(&mut g, &model, &batch)?;
        last_loss = g.scalar(loss) as f64;
        if !last_loss.is_finite() {
            return Err(Error::NumericDomain(format!(
                "pretraining loss {last_loss} at step {step}"
            )));
        }
        let grads = g.backward(loss)?;
        let norm = grads.norm();
        let clip = if pc.clip > 0.0 && norm > pc.clip {
            pc.clip / norm
        } else {
            1.0
        };
        let warm = if pc.warmup > 0 {
            (step as f64 / pc.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let gts: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.get(v).expect("parameter gradient").scale(clip as f32))
            .collect();
        let grefs: Vec<&Tensor<f32>> = gts.iter().collect();
        let mut prefs: Vec<&mut Tensor<f32>> = model.params.named_mut().into_iter().map(|(_, t)| t).collect();
        opt.update(&mut prefs, &grefs, warm)?;
        steps = step;
        let mut entry = PretrainLog {
            step,
            loss: last_loss,
            heldout_accuracy: None,
        };
        if step % pc.eval_every == 0 || step == pc.max_steps {
            acc = teacher_forced_accuracy(&model, vocab, &heldout)?;
            entry.heldout_accuracy = Some(acc);
        }
        on_log(&entry);
        let done = entry.heldout_accuracy.is_some_and(|a| a >= pc.target_accuracy);
        log.push(entry);
        if done {
            break;
        }
    }
    if steps == 0 {
        acc = teacher_forced_accuracy(&model, vocab, &heldout)?;
    }
    let text_accuracy = teacher_forced_accuracy(&model, vocab, &texts)?;
    let report = PretrainReport {
        steps,
        final_loss: last_loss,
        heldout_accuracy: acc,
        text_accuracy,
        log,
    };
    Ok((model, report))
}
