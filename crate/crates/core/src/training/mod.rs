// SPDX-License-Identifier: MIT OR Apache-2.0

//! Base-model pretraining and the adapter training objective.

mod adapter;
mod objective;
mod optim;
mod pretrain;

pub use adapter::{draw_batch, train_loop, train_step, CheckpointRecord, TrainConfig, TrainOutcome, TrainStepReport};
pub use objective::{
    align_weights, attribution_targets, im_align_loss, im_polarity_losses, loss_values, objective_graph,
    objective_values, prepare_case, CaseDraw, Donor, FrozenSuffix, LossFlags, LossTerms, PreparedCase, SeqCache,
    ALIGN_EPS,
};
pub use optim::Adam;
pub use pretrain::{
    pretrain, teacher_forced_accuracy, tf_sample, PretrainConfig, PretrainLog, PretrainReport, TfSample,
};

#[cfg(test)]
mod tests;
