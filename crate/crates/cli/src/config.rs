// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a TOML file, dotted `key=value` overrides, full
//! schema validation and an echo of the effective values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use visedit_core::attribution::PerturbationSpec;
use visedit_core::evalbench::{AdapterSetup, FtConfig};
use visedit_core::toyvlm::ModelConfig;
use visedit_core::training::{LossFlags, PretrainConfig, TrainConfig};

use crate::error::{CliError, CliResult};

/// Environment variable naming the run-directory root.
pub const RUN_ROOT_ENV: &str = "VISEDIT_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub attribution: AttributionConfig,
    pub vead: AdapterSetup,
    pub train: TrainBlock,
    pub baseline: FtConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            attribution: AttributionConfig::default(),
            vead: AdapterSetup::default(),
            train: TrainBlock::default(),
            baseline: FtConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// VQA samples written by `gen-data`.
    pub vqa_samples: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub counterfactual: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vqa_samples: 2000,
            n_train: 2000,
            n_eval: 200,
            counterfactual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    /// Noise draws per position.
    pub draws: usize,
    pub multiplier: f64,
    pub noise_seed: u64,
    /// Share of layers kept as high-contribution layers.
    pub fraction: f64,
    /// Calibration samples for the layer statistics.
    pub samples: usize,
    /// Which sample (or edit case) the heatmaps and bars are drawn for.
    pub index: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        let p = PerturbationSpec::default();
        Self {
            draws: p.draws,
            multiplier: p.multiplier,
            noise_seed: p.seed,
            fraction: 0.25,
            samples: 200,
            index: 0,
        }
    }
}

impl AttributionConfig {
    pub fn perturbation(&self) -> PerturbationSpec {
        PerturbationSpec {
            multiplier: self.multiplier,
            draws: self.draws,
            seed: self.noise_seed,
        }
    }
}

/// Adapter optimisation settings. Empty `l_h` means "use the calibration".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub max_iters: usize,
    pub n_s: usize,
    pub l_h: Vec<usize>,
    pub checkpoint_every: usize,
    pub smooth_window: usize,
    pub clip: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            lr: t.lr,
            batch: t.batch,
            max_iters: t.max_iters,
            n_s: t.n_s,
            l_h: t.l_h,
            checkpoint_every: t.checkpoint_every,
            smooth_window: t.smooth_window,
            clip: t.clip,
        }
    }
}

impl TrainBlock {
    pub fn to_train_config(&self, l_h: Vec<usize>, perturbation: PerturbationSpec) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            lr: self.lr,
            batch: self.batch,
            max_iters: self.max_iters,
            n_s: self.n_s,
            l_h,
            checkpoint_every: self.checkpoint_every,
            smooth_window: self.smooth_window,
            clip: self.clip,
            flags: LossFlags::default(),
            perturbation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Insertion layers; empty means `{1, L/4, L/2, 3L/4, L}`.
    pub layers: Vec<usize>,
    /// Iterations per swept adapter; 0 keeps `train.max_iters`.
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Variant tags: `full`, `-im_down`, `-im_up`, `-im_align`, `-IM`, `-CA`.
    pub variants: Vec<String>,
    /// Iterations per variant; 0 keeps `train.max_iters`.
    pub max_iters: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: ["full", "-im_down", "-im_up", "-im_align", "-IM", "-CA"]
                .map(String::from)
                .to_vec(),
            max_iters: 0,
        }
    }
}

/// Inputs produced by earlier commands. Empty strings mean "not set".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub run_root: String,
    pub data_dir: String,
    pub pretrain_ckpt: String,
    pub vead_ckpt: String,
}

impl PathsConfig {
    /// `run_root`, else the environment variable, else `runs`.
    pub fn resolved_run_root(&self) -> PathBuf {
        if !self.run_root.is_empty() {
            return self.run_root.clone().into();
        }
        match std::env::var(RUN_ROOT_ENV) {
            Ok(v) if !v.is_empty() => v.into(),
            _ => "runs".into(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override. The value is read as TOML and falls
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad key path `{key}`")));
    }
    let (last, prefix) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in prefix {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a validated config from TOML text plus overrides.
pub fn parse_config_str(text: &str, overrides: &[String]) -> CliResult<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Reads `path` (or pure defaults when `None`) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let text = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!("config file {} does not exist", p.display())));
            }
            std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?
        }
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

pub fn validate(cfg: &RunConfig) -> CliResult<()> {
    cfg.model.validate()?;
    cfg.attribution.perturbation().validate()?;
    let bad = |m: String| Err(CliError::Config(m));
    let layers = cfg.model.layers;
    if cfg.vead.l_e == 0 || cfg.vead.l_e > layers {
        return bad(format!("vead.l_e = {} outside 1..={layers}", cfg.vead.l_e));
    }
    if cfg.vead.d_a == 0 {
        return bad("vead.d_a must be >= 1".into());
    }
    if !(cfg.attribution.fraction > 0.0 && cfg.attribution.fraction <= 1.0) {
        return bad(format!(
            "attribution.fraction = {} outside (0, 1]",
            cfg.attribution.fraction
        ));
    }
    if cfg.attribution.samples == 0 {
        return bad("attribution.samples must be >= 1".into());
    }
    if let Some(l) = cfg
        .train
        .l_h
        .iter()
        .chain(&cfg.sweep.layers)
        .find(|&&l| l == 0 || l > layers)
    {
        return bad(format!("layer {l} outside 1..={layers}"));
    }
    if cfg.data.n_train == 0 || cfg.data.n_eval == 0 {
        return bad("data.n_train and data.n_eval must be >= 1".into());
    }
    for v in &cfg.ablate.variants {
        crate::commands::parse_ablation(v)?;
    }
    let n_visual = cfg.model.grid_rows * cfg.model.grid_cols;
    cfg.train
        .to_train_config(vec![layers], cfg.attribution.perturbation())
        .validate(n_visual)
        .map_err(|e| CliError::Config(e.to_string()))
}

/// The effective configuration as TOML.
pub fn echo(cfg: &RunConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))
}
