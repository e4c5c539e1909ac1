// SPDX-License-Identifier: MIT OR Apache-2.0

//! Manifest + little-endian `f32` blob checkpoints.
//!
//! The manifest is `key = value` text. Tensor lines read
//! `tensor <name> <dims joined by x> <offset> <count>`, offsets counted in
//! floats from the start of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::model::ToyVlm;
use super::params::ToyVlmParams;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Decoded checkpoint: header keys plus tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` with extension replaced.
pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    meta: &[(String, String)],
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut text = format!("format_version = {FORMAT_VERSION}\ndtype = f32le\n");
    for (k, v) in meta {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        text.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join("x"), t.len()));
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += t.len();
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() % 4 != 0 {
        return Err(bad(format!("blob length {} not a multiple of 4", bytes.len())));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut meta = BTreeMap::new();
    let mut tensors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [name, dims, off, count] = f.as_slice() else {
                return Err(bad(format!("line {}: malformed tensor entry", i + 1)));
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(format!("line {}: bad number `{s}`", i + 1)))
            };
            let shape = dims.split('x').map(parse).collect::<Result<Vec<_>>>()?;
            let (off, count) = (parse(off)?, parse(count)?);
            if off + count > floats.len() {
                return Err(bad(format!("tensor {name} runs past the blob end")));
            }
            let t = Tensor::new(shape, floats[off..off + count].to_vec())
                .map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push((name.to_string(), t));
        } else if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(bad(format!("line {}: expected `key = value`", i + 1)));
        }
    }
    match meta.get("format_version").map(String::as_str) {
        Some(v) if v == FORMAT_VERSION.to_string() => {}
        other => return Err(bad(format!("unsupported format_version {other:?}"))),
    }
    Ok(Checkpoint { meta, tensors })
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format {
            path: PathBuf::from("<checkpoint>"),
            msg: format!("missing key `{key}`"),
        })
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let s = self.get(key)?;
        s.parse().map_err(|_| Error::Format {
            path: PathBuf::from("<checkpoint>"),
            msg: format!("bad value `{s}` for `{key}`"),
        })
    }
}

fn config_meta(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("kind".into(), "toyvlm".into()),
        ("config.layers".into(), cfg.layers.to_string()),
        ("config.d_model".into(), cfg.d_model.to_string()),
        ("config.heads".into(), cfg.heads.to_string()),
        ("config.d_ff".into(), cfg.d_ff.to_string()),
        ("config.grid_rows".into(), cfg.grid_rows.to_string()),
        ("config.grid_cols".into(), cfg.grid_cols.to_string()),
        ("config.patch_dim".into(), cfg.patch_dim.to_string()),
        ("config.vocab_size".into(), cfg.vocab_size.to_string()),
        ("config.max_text_len".into(), cfg.max_text_len.to_string()),
        ("config.init_std".into(), format!("{:?}", cfg.init_std)),
    ]
}

impl<T: Scalar> ToyVlm<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &config_meta(&self.config), &self.params.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.get("kind")? != "toyvlm" {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("not a model checkpoint (kind = {})", ck.get("kind")?),
            });
        }
        let config = ModelConfig {
            layers: ck.parse("config.layers")?,
            d_model: ck.parse("config.d_model")?,
            heads: ck.parse("config.heads")?,
            d_ff: ck.parse("config.d_ff")?,
            grid_rows: ck.parse("config.grid_rows")?,
            grid_cols: ck.parse("config.grid_cols")?,
            patch_dim: ck.parse("config.patch_dim")?,
            vocab_size: ck.parse("config.vocab_size")?,
            max_text_len: ck.parse("config.max_text_len")?,
            init_std: ck.parse("config.init_std")?,
        };
        config.validate()?;
        let mut params = ToyVlmParams::<T>::zeros_like(&config);
        fill_named(path, params.named_mut(), &ck.tensors)?;
        Self::new(config, params)
    }
}

/// Copies checkpoint tensors into `slots`, matching names and shapes in order.
pub fn fill_named<T: Scalar>(
    path: &Path,
    slots: Vec<(String, &mut Tensor<T>)>,
    tensors: &[(String, Tensor<f32>)],
) -> Result<()> {
    let bad = |msg: String| Error::Format { path: path.into(), msg };
    if slots.len() != tensors.len() {
        return Err(bad(format!("{} tensors, expected {}", tensors.len(), slots.len())));
    }
    for ((name, slot), (got, t)) in slots.into_iter().zip(tensors) {
        if &name != got {
            return Err(bad(format!("expected tensor {name}, found {got}")));
        }
        if slot.shape() != t.shape() {
            return Err(bad(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.cast();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_in_f32() {
        let dir = std::env::temp_dir().join(format!("visedit-ck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let m = ToyVlm::<f32>::init(ModelConfig::default(), 3).unwrap();
        m.save(&path).unwrap();
        let back = ToyVlm::<f32>::load(&path).unwrap();
        assert_eq!(m, back);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("tensor layers.8.w2 128x64"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("visedit-ck-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let m = ToyVlm::<f32>::init(ModelConfig::default(), 3).unwrap();
        m.save(&path).unwrap();
        fs::write(path.with_extension("bin"), [0u8; 8]).unwrap();
        assert!(matches!(ToyVlm::<f32>::load(&path), Err(Error::Format { .. })));
        fs::remove_dir_all(&dir).unwrap();
    }
}
