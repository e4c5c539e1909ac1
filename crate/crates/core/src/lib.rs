// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy vision-language model, contribution analysis and the visual edit adapter.

pub mod error;
pub mod numerics;

pub mod attribution;
pub mod datagen;
pub mod evalbench;
pub mod toyvlm;
pub mod training;
pub mod vead;

pub use error::{Error, Result};

/// Single-precision tensor, the training and evaluation default.
pub type Tensor32 = numerics::Tensor<f32>;
/// Double-precision tensor for oracles and gradient checks.
pub type Tensor64 = numerics::Tensor<f64>;
pub type ToyVlm32 = toyvlm::ToyVlm<f32>;
pub type ToyVlm64 = toyvlm::ToyVlm<f64>;
pub type Vead32 = vead::VeadParams<f32>;
pub type Vead64 = vead::VeadParams<f64>;
