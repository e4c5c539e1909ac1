// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small early-fusion vision-language transformer without normalization
//! layers, with full trace capture and attention re-computation.

pub mod checkpoint;
mod config;
pub mod diff;
mod model;
mod params;

pub use config::ModelConfig;
pub use model::{argmax, Answerer, AttentionProbe, Embedding, HiddenTrace, LayerHook, ToyVlm};
pub use params::{LayerParams, ToyVlmParams};
