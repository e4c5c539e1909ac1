// SPDX-License-Identifier: MIT OR Apache-2.0

//! Question templates, the rule oracle and the pretraining set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{random_scene, Color, Scene, Shape, ToyImage};
use super::vocab::{Vocab, ASSOCIATIONS, NUMBERS};
use crate::error::{Error, Result};

/// What a visual question asks about the target object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    /// "what color is the circle" → color word
    Color,
    /// "what shape is the red object" → shape word
    Shape,
    /// "where is the circle" → two position words
    Where,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [QuestionKind::Color, QuestionKind::Shape, QuestionKind::Where];
}

/// Number of paraphrase templates per question kind.
pub const TEMPLATES: usize = 2;

/// Question text about `scene`'s target with the given template.
pub fn visual_question(kind: QuestionKind, scene: &Scene, template: usize) -> String {
    let t = scene.target();
    match (kind, template % TEMPLATES) {
        (QuestionKind::Color, 0) => format!("what color is the {}", t.shape.word()),
        (QuestionKind::Color, _) => format!("which color does the {} have", t.shape.word()),
        (QuestionKind::Shape, 0) => format!("what shape is the {} object", t.color.word()),
        (QuestionKind::Shape, _) => {
            format!("which shape does the {} object have", t.color.word())
        }
        (QuestionKind::Where, 0) => format!("where is the {}", t.shape.word()),
        (QuestionKind::Where, _) => format!("where can the {} be found", t.shape.word()),
    }
}

/// Ground-truth answer for `scene`'s target.
pub fn visual_answer(kind: QuestionKind, scene: &Scene) -> String {
    let t = scene.target();
    match kind {
        QuestionKind::Color => t.color.word().to_string(),
        QuestionKind::Shape => t.shape.word().to_string(),
        QuestionKind::Where => scene.image.quadrant(scene.target_cell).join(" "),
    }
}

/// The closed list of text-only questions and their answers.
pub fn text_questions() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for a in 0..=4 {
        for b in 0..=4 {
            out.push((
                format!("what is {} plus {}", NUMBERS[a], NUMBERS[b]),
                NUMBERS[a + b].to_string(),
            ));
        }
    }
    for (noun, color) in ASSOCIATIONS {
        out.push((format!("what color is the {noun}"), color.to_string()));
    }
    out
}

/// Rule-based answer derived only from the question text and the image.
///
/// Returns `None` for text that matches no template or a question whose
/// referent is missing or ambiguous in the image.
pub fn oracle_answer(image: Option<&ToyImage>, question: &str) -> Option<String> {
    let w: Vec<&str> = question.split_whitespace().collect();
    let find_shape = |img: &ToyImage, s: Shape| {
        let hits: Vec<_> = img.objects().filter(|(_, o)| o.shape == s).collect();
        (hits.len() == 1).then(|| hits[0])
    };
    let find_color = |img: &ToyImage, c: Color| {
        let hits: Vec<_> = img.objects().filter(|(_, o)| o.color == c).collect();
        (hits.len() == 1).then(|| hits[0])
    };
    match (image, w.as_slice()) {
        (None, ["what", "is", a, "plus", b]) => {
            let a = NUMBERS.iter().position(|n| n == a)?;
            let b = NUMBERS.iter().position(|n| n == b)?;
            NUMBERS.get(a + b).map(|s| s.to_string())
        }
        (None, ["what", "color", "is", "the", noun]) => {
            ASSOCIATIONS.iter().find(|(n, _)| n == noun).map(|(_, c)| c.to_string())
        }
        (Some(img), ["what", "color", "is", "the", s]) | (Some(img), ["which", "color", "does", "the", s, "have"]) => {
            let (_, o) = find_shape(img, Shape::from_word(s)?)?;
            Some(o.color.word().to_string())
        }
        (Some(img), ["what", "shape", "is", "the", c, "object"])
        | (Some(img), ["which", "shape", "does", "the", c, "object", "have"]) => {
            let (_, o) = find_color(img, Color::from_word(c)?)?;
            Some(o.shape.word().to_string())
        }
        (Some(img), ["where", "is", "the", s]) | (Some(img), ["where", "can", "the", s, "be", "found"]) => {
            let (cell, _) = find_shape(img, Shape::from_word(s)?)?;
            Some(img.quadrant(cell).join(" "))
        }
        _ => None,
    }
}

/// One question/answer pair, with or without an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub image: Option<ToyImage>,
    pub prompt: String,
    pub answer: String,
}

impl QaSample {
    /// `<bos> question <sep>`
    pub fn prompt_ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        prompt_ids(vocab, &self.prompt)
    }

    pub fn answer_ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        vocab.tokenize(&self.answer)
    }
}

pub fn prompt_ids(vocab: &Vocab, question: &str) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.tokenize(question)?);
    ids.push(vocab.sep());
    Ok(ids)
}

/// Independent random stream for item `index` under `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Fraction of pretraining samples that are text-only.
const TEXT_FRACTION: f64 = 0.15;

/// Generates `n` pretraining samples on a `rows x cols` grid.
pub fn gen_pretrain_set(seed: u64, n: usize, rows: usize, cols: usize) -> Result<Vec<QaSample>> {
    if n == 0 {
        return Err(Error::Contract("pretraining set size must be >= 1".into()));
    }
    Ok((0..n).map(|i| pretrain_sample(seed, i as u64, rows, cols)).collect())
}

/// Item `index` of the unbounded pretraining stream under `seed`.
pub fn pretrain_sample(seed: u64, index: u64, rows: usize, cols: usize) -> QaSample {
    let mut rng = substream(seed, index);
    if rng.gen_bool(TEXT_FRACTION) {
        let texts = text_questions();
        let (q, a) = texts.choose(&mut rng).unwrap().clone();
        QaSample {
            image: None,
            prompt: q,
            answer: a,
        }
    } else {
        let scene = random_scene(&mut rng, rows, cols, &Shape::ALL, &Color::ALL, None, None);
        let kind = *QuestionKind::ALL.choose(&mut rng).unwrap();
        let template = rng.gen_range(0..TEMPLATES);
        QaSample {
            prompt: visual_question(kind, &scene, template),
            answer: visual_answer(kind, &scene),
            image: Some(scene.image),
        }
    }
}

/// Visual-only variant, used for held-out accuracy checks.
pub fn gen_vqa_set(seed: u64, n: usize, rows: usize, cols: usize) -> Vec<QaSample> {
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let scene = random_scene(&mut rng, rows, cols, &Shape::ALL, &Color::ALL, None, None);
            let kind = *QuestionKind::ALL.choose(&mut rng).unwrap();
            let template = rng.gen_range(0..TEMPLATES);
            QaSample {
                prompt: visual_question(kind, &scene, template),
                answer: visual_answer(kind, &scene),
                image: Some(scene.image),
            }
        })
        .collect()
}
