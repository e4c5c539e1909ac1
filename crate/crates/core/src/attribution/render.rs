// SPDX-License-Identifier: MIT OR Apache-2.0

//! Graymap heatmaps, numeric sidecars and bar-chart data.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::contribution::ModuleContribution;
use crate::error::{Error, Result};

/// Min-max normalized pixel values; a constant map is uniform 128.
pub fn heatmap_pixels(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / (max - min) * 255.0).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    rows: usize,
    cols: usize,
    min: f64,
    max: f64,
    values: &'a [f64],
}

/// Writes a binary graymap at `path` and a JSON sidecar next to it.
pub fn render_heatmap(values: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    if rows * cols != values.len() {
        return Err(Error::Shape(format!(
            "{} values do not fill a {rows}x{cols} grid",
            values.len()
        )));
    }
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(heatmap_pixels(values));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        rows,
        cols,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        values,
    };
    let sp = path.with_extension("json");
    fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

#[derive(Serialize)]
struct BarRow {
    layer: usize,
    module: &'static str,
    c_p: f64,
    c_v: f64,
    c: f64,
}

/// One CSV row per layer and module kind.
pub fn write_bar_data(mc: &ModuleContribution, path: &Path) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    for s in &mc.scores {
        w.serialize(BarRow {
            layer: s.layer,
            module: s.kind.name(),
            c_p: s.c_p,
            c_v: s.c_v,
            c: s.c,
        })
        .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
