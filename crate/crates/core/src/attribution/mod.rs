// SPDX-License-Identifier: MIT OR Apache-2.0

//! Module-output and visual-representation attribution.

mod calibrate;
mod contribution;
mod render;
mod visual;

pub use calibrate::{
    calibrate, control_summary, half_means, prompt_trace, unrelated_answers, Calibration, ControlSummary,
};
pub use contribution::{
    combine, control_attribution, high_contribution_layers, mean_layer_contribution, module_contribution, ratio,
    scores_from_logits, ControlReport, ModuleContribution, ModuleKind, ModuleScore,
};
pub use render::{heatmap_pixels, render_heatmap, write_bar_data};
pub use visual::{
    perturb_positions, perturbation_score, visual_contribution, visual_std, PerturbationSpec, VisualContributionMap,
};
