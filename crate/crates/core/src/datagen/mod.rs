// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic multimodal data: grid scenes, templated
//! questions and edit cases with their companions.

mod cases;
pub mod io;
mod samples;
mod scene;
mod vocab;

pub use cases::{gen_edit_cases, BaseAnswerer, EditCase, EditCaseOptions};
pub use samples::{
    gen_pretrain_set, gen_vqa_set, oracle_answer, pretrain_sample, prompt_ids, substream, text_questions,
    visual_answer, visual_question, QaSample, QuestionKind, TEMPLATES,
};
pub use scene::{random_scene, rephrase_scene, Color, Object, Scene, Shape, ToyImage, PATCH_DIM};
pub use vocab::{Vocab, ASSOCIATIONS, COLORS, NUMBERS, SHAPES};
