// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-lines dataset files and their manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cases::EditCase;
use super::samples::{QaSample, QuestionKind};
use super::scene::ToyImage;
use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub role: String,
    pub image: Option<ToyImage>,
    pub prompt: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<EditMeta>,
}

/// Extra fields carried by the `edit` record of a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMeta {
    pub kind: QuestionKind,
    pub target_cell: usize,
    pub true_answer: String,
    pub base_answer: String,
    pub counterfactual: bool,
}

/// Dataset manifest written next to the record files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: Vec<(String, usize)>,
    pub vocabulary: Vec<String>,
}

fn qa_record(id: String, role: &str, s: &QaSample) -> Record {
    Record {
        id,
        role: role.to_string(),
        image: s.image.clone(),
        prompt: s.prompt.clone(),
        answer: s.answer.clone(),
        meta: None,
    }
}

pub fn pretrain_records(samples: &[QaSample]) -> Vec<Record> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let role = if s.image.is_some() { "vqa" } else { "text" };
            qa_record(format!("sample-{i:06}"), role, s)
        })
        .collect()
}

pub fn case_records(cases: &[EditCase]) -> Vec<Record> {
    let mut out = Vec::with_capacity(cases.len() * 5);
    for c in cases {
        let id = format!("case-{:06}", c.id);
        let mut edit = qa_record(id.clone(), "edit", &c.edit);
        edit.meta = Some(EditMeta {
            kind: c.kind,
            target_cell: c.target_cell,
            true_answer: c.true_answer.clone(),
            base_answer: c.base_answer.clone(),
            counterfactual: c.counterfactual,
        });
        out.push(edit);
        out.push(qa_record(id.clone(), "mg", &c.mg_sample()));
        out.push(qa_record(id.clone(), "tg", &c.tg_sample()));
        out.push(qa_record(id.clone(), "ml", &c.ml));
        out.push(qa_record(id, "tl", &c.tl));
    }
    out
}

/// Rebuilds cases from records produced by [`case_records`].
pub fn cases_from_records(records: &[Record]) -> Result<Vec<EditCase>> {
    let bad = |m: String| Error::Format {
        path: "<records>".into(),
        msg: m,
    };
    let mut out = Vec::new();
    for chunk in records.chunks(5) {
        let roles: Vec<&str> = chunk.iter().map(|r| r.role.as_str()).collect();
        if roles != ["edit", "mg", "tg", "ml", "tl"] {
            return Err(bad(format!("unexpected role sequence {roles:?}")));
        }
        if chunk.iter().any(|r| r.id != chunk[0].id) {
            return Err(bad(format!("mixed ids in case {}", chunk[0].id)));
        }
        let id: usize = chunk[0]
            .id
            .trim_start_matches("case-")
            .parse()
            .map_err(|_| bad(format!("bad case id {}", chunk[0].id)))?;
        let meta = chunk[0]
            .meta
            .clone()
            .ok_or_else(|| bad(format!("case {id} lacks metadata")))?;
        let to_qa = |r: &Record| QaSample {
            image: r.image.clone(),
            prompt: r.prompt.clone(),
            answer: r.answer.clone(),
        };
        let case = EditCase {
            id,
            kind: meta.kind,
            edit: to_qa(&chunk[0]),
            target_cell: meta.target_cell,
            true_answer: meta.true_answer,
            base_answer: meta.base_answer,
            mg_image: chunk[1]
                .image
                .clone()
                .ok_or_else(|| bad(format!("case {id}: mg without image")))?,
            tg_prompt: chunk[2].prompt.clone(),
            ml: to_qa(&chunk[3]),
            tl: to_qa(&chunk[4]),
            counterfactual: meta.counterfactual,
        };
        case.check_invariants()?;
        out.push(case);
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.into(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
