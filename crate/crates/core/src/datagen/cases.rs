// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit cases with generality and locality companions.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::samples::{
    oracle_answer, prompt_ids, substream, text_questions, visual_answer, visual_question, QaSample, QuestionKind,
    TEMPLATES,
};
use super::scene::{random_scene, rephrase_scene, Color, Shape, ToyImage};
use super::vocab::{Vocab, COLORS, SHAPES};
use crate::error::{Error, Result};

/// Anything that can produce the unedited model's greedy answer.
pub trait BaseAnswerer {
    /// Greedy answer ids (end-of-sequence excluded) for `<bos> prompt <sep>` ids.
    fn base_answer(&self, image: Option<&ToyImage>, prompt: &[usize]) -> Result<Vec<usize>>;
}

/// One edit sample with its four companions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub id: usize,
    pub kind: QuestionKind,
    /// Edit image, prompt and the new answer `o^e`.
    pub edit: QaSample,
    pub target_cell: usize,
    /// Rule-oracle answer for the edit prompt.
    pub true_answer: String,
    /// What the unedited model answers.
    pub base_answer: String,
    /// Modal generality: same target object and cell, distractors moved.
    pub mg_image: ToyImage,
    /// Text generality: other template of the same question.
    pub tg_prompt: String,
    /// Modal locality; `answer` is the base model's own output.
    pub ml: QaSample,
    /// Text locality (no image); `answer` is the base model's own output.
    pub tl: QaSample,
    pub counterfactual: bool,
}

fn attribute_words(text: &str) -> HashSet<&str> {
    text.split_whitespace()
        .filter(|w| SHAPES.contains(w) || COLORS.contains(w))
        .collect()
}

impl EditCase {
    /// Validates every structural invariant of the case.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Contract(format!("edit case {}: {m}", self.id)));
        let Some(img) = self.edit.image.as_ref() else {
            return fail("edit sample has no image");
        };
        if self.edit.answer == self.base_answer {
            return fail("new answer equals the base answer");
        }
        if self.mg_image.cells[self.target_cell] != img.cells[self.target_cell] {
            return fail("modal-generality image moved the target");
        }
        if oracle_answer(Some(&self.mg_image), &self.edit.prompt) != oracle_answer(Some(img), &self.edit.prompt) {
            return fail("modal-generality image changes the true answer");
        }
        if oracle_answer(Some(img), &self.tg_prompt) != Some(self.true_answer.clone()) {
            return fail("text-generality prompt changes the true answer");
        }
        let edit_words: HashSet<&str> = attribute_words(&self.edit.prompt)
            .into_iter()
            .chain(attribute_words(&self.edit.answer))
            .collect();
        let ml_words: HashSet<&str> = attribute_words(&self.ml.prompt)
            .into_iter()
            .chain(attribute_words(&self.ml.answer))
            .collect();
        if !edit_words.is_disjoint(&ml_words) {
            return fail("modal-locality sample shares attribute words");
        }
        if self.ml.image.is_none() {
            return fail("modal-locality sample has no image");
        }
        if self.tl.image.is_some() {
            return fail("text-locality sample has an image");
        }
        if self.edit.answer.is_empty() || self.ml.answer.is_empty() || self.tl.answer.is_empty() {
            return fail("empty answer");
        }
        Ok(())
    }

    pub fn mg_sample(&self) -> QaSample {
        QaSample {
            image: Some(self.mg_image.clone()),
            prompt: self.edit.prompt.clone(),
            answer: self.edit.answer.clone(),
        }
    }

    pub fn tg_sample(&self) -> QaSample {
        QaSample {
            image: self.edit.image.clone(),
            prompt: self.tg_prompt.clone(),
            answer: self.edit.answer.clone(),
        }
    }
}

/// Options for [`gen_edit_cases`].
#[derive(Debug, Clone, Copy)]
pub struct EditCaseOptions {
    pub rows: usize,
    pub cols: usize,
    /// Force the new answer to contradict the image even when the base model is wrong.
    pub counterfactual: bool,
}

/// Builds `n` edit cases from candidate scenes scored by the base model.
pub fn gen_edit_cases<B: BaseAnswerer>(
    seed: u64,
    n: usize,
    opts: EditCaseOptions,
    vocab: &Vocab,
    base: &B,
) -> Result<Vec<EditCase>> {
    let mut cases = Vec::with_capacity(n);
    let max_attempts = 50 * n.max(1);
    let mut attempt = 0u64;
    while cases.len() < n {
        if attempt as usize >= max_attempts {
            return Err(Error::Degenerate(format!(
                "insufficient candidate pool: {} of {n} cases after {attempt} candidates",
                cases.len()
            )));
        }
        let mut rng = substream(seed, attempt);
        attempt += 1;
        if let Some(case) = candidate(&mut rng, cases.len(), opts, vocab, base)? {
            cases.push(case);
        }
    }
    Ok(cases)
}

fn decode(vocab: &Vocab, ids: &[usize]) -> Result<String> {
    vocab.detokenize(ids)
}

fn candidate<R: Rng, B: BaseAnswerer>(
    rng: &mut R,
    id: usize,
    opts: EditCaseOptions,
    vocab: &Vocab,
    base: &B,
) -> Result<Option<EditCase>> {
    let kind = *[QuestionKind::Color, QuestionKind::Shape].choose(rng).unwrap();
    let scene = random_scene(rng, opts.rows, opts.cols, &Shape::ALL, &Color::ALL, None, None);
    let template = rng.gen_range(0..TEMPLATES);
    let prompt = visual_question(kind, &scene, template);
    let truth = visual_answer(kind, &scene);
    let base_ids = base.base_answer(Some(&scene.image), &prompt_ids(vocab, &prompt)?)?;
    let base_answer = decode(vocab, &base_ids)?;

    let pool: Vec<&str> = match kind {
        QuestionKind::Color => COLORS.to_vec(),
        _ => SHAPES.to_vec(),
    };
    let new_answer = if !opts.counterfactual && base_answer != truth && pool.contains(&truth.as_str()) {
        truth.clone()
    } else {
        let options: Vec<&str> = pool
            .iter()
            .copied()
            .filter(|w| *w != truth && *w != base_answer)
            .collect();
        match options.choose(rng) {
            Some(w) => w.to_string(),
            None => return Ok(None),
        }
    };

    let mg = rephrase_scene(rng, &scene);
    let tg_prompt = visual_question(kind, &scene, template + 1);

    // Locality scene avoids every attribute word tied to the edit.
    let banned: HashSet<&str> = attribute_words(&prompt)
        .into_iter()
        .chain(attribute_words(&new_answer))
        .chain(attribute_words(&truth))
        .chain(attribute_words(&base_answer))
        .collect();
    let shapes: Vec<Shape> = Shape::ALL.into_iter().filter(|s| !banned.contains(s.word())).collect();
    let colors: Vec<Color> = Color::ALL.into_iter().filter(|c| !banned.contains(c.word())).collect();
    if shapes.is_empty() || colors.is_empty() {
        return Ok(None);
    }
    let ml_scene = random_scene(rng, opts.rows, opts.cols, &shapes, &colors, None, None);
    let ml_kind = *QuestionKind::ALL.choose(rng).unwrap();
    let ml_prompt = visual_question(ml_kind, &ml_scene, rng.gen_range(0..TEMPLATES));
    let ml_ids = base.base_answer(Some(&ml_scene.image), &prompt_ids(vocab, &ml_prompt)?)?;

    let (tl_prompt, _) = text_questions().choose(rng).unwrap().clone();
    let tl_ids = base.base_answer(None, &prompt_ids(vocab, &tl_prompt)?)?;
    if ml_ids.is_empty() || tl_ids.is_empty() {
        return Ok(None);
    }

    let case = EditCase {
        id,
        kind,
        edit: QaSample {
            image: Some(scene.image.clone()),
            prompt,
            answer: new_answer,
        },
        target_cell: scene.target_cell,
        true_answer: truth,
        base_answer,
        mg_image: mg.image,
        tg_prompt,
        ml: QaSample {
            image: Some(ml_scene.image),
            prompt: ml_prompt,
            answer: decode(vocab, &ml_ids)?,
        },
        tl: QaSample {
            image: None,
            prompt: tl_prompt,
            answer: decode(vocab, &tl_ids)?,
        },
        counterfactual: opts.counterfactual,
    };
    Ok(case.check_invariants().is_ok().then_some(case))
}
