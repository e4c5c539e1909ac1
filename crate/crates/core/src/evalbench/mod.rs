// SPDX-License-Identifier: MIT OR Apache-2.0

//! Editing metrics, the last-layer fine-tuning baseline, layer sweeps and ablations.

mod editors;
mod experiments;
mod ft;
mod metrics;

pub use editors::{EditedModel, Editor, FtEditor, NoEdit, VeadEditor};
pub use experiments::{
    edit_splits, intensity_contrast, layer_sweep, prepare_cases, run_ablation, sweep_layers, train_adapter,
    train_prepared, Ablation, AdapterSetup,
};
pub use ft::{ft_baseline, FtConfig, FtOverlay};
pub use metrics::{evaluate, evaluate_edit, token_match, write_table, CaseScores, MetricsReport};
