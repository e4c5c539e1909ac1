// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::editors::{EditedModel, Editor};
use crate::datagen::{EditCase, QaSample, Vocab};
use crate::error::{Error, Result};
use crate::numerics::kernels::{kl_divergence, softmax_in_place};
use crate::numerics::{Scalar, Tensor};
use crate::toyvlm::{argmax, ToyVlm};

/// Fraction of gold positions whose predicted token matches.
pub fn token_match(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Contract("token match needs a nonempty gold answer".into()));
    }
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold tokens",
            predicted.len(),
            gold.len()
        )));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Scores of one edit case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub id: usize,
    pub rel: f64,
    pub t_gen: f64,
    pub m_gen: f64,
    pub t_loc: f64,
    pub m_loc: f64,
    /// Mean KL(base ‖ edited) over the modal-locality answer positions.
    pub m_loc_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub editor: String,
    /// How each metric is counted.
    pub granularity: String,
    pub n_cases: usize,
    pub rel: f64,
    pub t_gen: f64,
    pub m_gen: f64,
    pub t_loc: f64,
    pub m_loc: f64,
    pub average: f64,
    pub m_loc_kl: f64,
    pub config: serde_json::Value,
    pub cases: Vec<CaseScores>,
}

impl MetricsReport {
    pub fn from_cases(editor: &str, cases: Vec<CaseScores>, config: serde_json::Value) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Contract("no cases to aggregate".into()));
        }
        let n = cases.len() as f64;
        let mean = |f: fn(&CaseScores) -> f64| cases.iter().map(f).sum::<f64>() / n;
        let (rel, t_gen, m_gen, t_loc, m_loc) = (
            mean(|c| c.rel),
            mean(|c| c.t_gen),
            mean(|c| c.m_gen),
            mean(|c| c.t_loc),
            mean(|c| c.m_loc),
        );
        Ok(Self {
            editor: editor.to_string(),
            granularity: "teacher-forced token accuracy".into(),
            n_cases: cases.len(),
            rel,
            t_gen,
            m_gen,
            t_loc,
            m_loc,
            average: (rel + t_gen + m_gen + t_loc + m_loc) / 5.0,
            m_loc_kl: mean(|c| c.m_loc_kl),
            config,
            cases,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn answer_rows(vocab: &Vocab, s: &QaSample, n_visual: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let prompt = s.prompt_ids(vocab)?;
    let answer = s.answer_ids(vocab)?;
    let first = n_visual + prompt.len() - 1;
    let rows = (first..first + answer.len()).collect();
    let mut tokens = prompt;
    tokens.extend(&answer);
    Ok((tokens, answer, rows))
}

fn accuracy<T: Scalar>(m: &dyn EditedModel<T>, vocab: &Vocab, s: &QaSample, nv: usize) -> Result<f64> {
    let (tokens, gold, rows) = answer_rows(vocab, s, if s.image.is_some() { nv } else { 0 })?;
    let logits = m.logits(s.image.as_ref(), &tokens)?;
    let pred: Vec<usize> = rows.iter().map(|&r| argmax(logits.row(r))).collect();
    token_match(&pred, &gold)
}

fn agreement<T: Scalar>(
    base: &ToyVlm<T>,
    m: &dyn EditedModel<T>,
    vocab: &Vocab,
    s: &QaSample,
    nv: usize,
) -> Result<(f64, f64)> {
    let (tokens, _, rows) = answer_rows(vocab, s, if s.image.is_some() { nv } else { 0 })?;
    let before = base.forward_trace(&base.embed(s.image.as_ref(), &tokens)?)?.logits;
    let after = m.logits(s.image.as_ref(), &tokens)?;
    let pre: Vec<usize> = rows.iter().map(|&r| argmax(before.row(r))).collect();
    let post: Vec<usize> = rows.iter().map(|&r| argmax(after.row(r))).collect();
    let probs = |t: &Tensor<T>, r: usize| {
        let mut v: Vec<f64> = t.row(r).iter().map(|x| x.as_f64()).collect();
        softmax_in_place(&mut v);
        v
    };
    let mut kl = 0.0;
    for &r in &rows {
        kl += kl_divergence(&probs(&before, r), &probs(&after, r))?;
    }
    Ok((token_match(&post, &pre)?, kl / rows.len() as f64))
}

/// Applies `editor` for this case alone and scores the five criteria.
pub fn evaluate_edit<T: Scalar>(
    model: &ToyVlm<T>,
    editor: &dyn Editor<T>,
    vocab: &Vocab,
    case: &EditCase,
) -> Result<CaseScores> {
    let nv = model.config.n_visual();
    let edited = editor.apply(model, vocab, case)?;
    let m = edited.as_ref();
    let (m_loc, m_loc_kl) = agreement(model, m, vocab, &case.ml, nv)?;
    let (t_loc, _) = agreement(model, m, vocab, &case.tl, nv)?;
    Ok(CaseScores {
        id: case.id,
        rel: accuracy(m, vocab, &case.edit, nv)?,
        t_gen: accuracy(m, vocab, &case.tg_sample(), nv)?,
        m_gen: accuracy(m, vocab, &case.mg_sample(), nv)?,
        t_loc,
        m_loc,
        m_loc_kl,
    })
}

/// Evaluates every case independently and aggregates.
pub fn evaluate<T: Scalar>(
    model: &ToyVlm<T>,
    editor: &dyn Editor<T>,
    vocab: &Vocab,
    cases: &[EditCase],
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let scores = cases
        .iter()
        .map(|c| evaluate_edit(model, editor, vocab, c))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(&editor.tag(), scores, config)
}

/// Writes labelled reports as a flat table.
pub fn write_table(path: &Path, rows: &[(String, &MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let fail = |e: csv::Error| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    };
    w.write_record([
        "label", "editor", "n_cases", "rel", "t_gen", "m_gen", "t_loc", "m_loc", "average",
    ])
    .map_err(fail)?;
    for (label, r) in rows {
        let f = |x: f64| format!("{x:.6}");
        w.write_record([
            label.clone(),
            r.editor.clone(),
            r.n_cases.to_string(),
            f(r.rel),
            f(r.t_gen),
            f(r.m_gen),
            f(r.t_loc),
            f(r.m_loc),
            f(r.average),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
