// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-world word-level tokenizer.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "white"];
pub const NUMBERS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];
/// Nouns with a conventional color, used by text-only questions.
pub const ASSOCIATIONS: [(&str, &str); 12] = [
    ("sky", "blue"),
    ("ocean", "blue"),
    ("grass", "green"),
    ("leaf", "green"),
    ("frog", "green"),
    ("sun", "yellow"),
    ("banana", "yellow"),
    ("lemon", "yellow"),
    ("snow", "white"),
    ("cloud", "white"),
    ("blood", "red"),
    ("cherry", "red"),
];

const FUNCTION_WORDS: [&str; 18] = [
    "what", "which", "where", "is", "the", "color", "shape", "object", "does", "have", "can", "be", "found", "top",
    "bottom", "left", "right", "plus",
];
const EXTRA_WORDS: [&str; 4] = ["minus", "of", "a", "and"];

/// Bidirectional word/id map over a fixed word list.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The fixed vocabulary used by every generator in this crate.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = vec![BOS, EOS, SEP];
        words.extend(FUNCTION_WORDS);
        words.extend(EXTRA_WORDS);
        words.extend(SHAPES);
        words.extend(COLORS);
        words.extend(NUMBERS);
        words.extend(ASSOCIATIONS.iter().map(|(noun, _)| *noun));
        Self::from_words(words.into_iter().map(String::from).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary")))
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    /// Whitespace-separated words to ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }
}
