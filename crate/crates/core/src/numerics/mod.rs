// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors, reverse-mode differentiation and the shared kernels.

mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, EntryCheck, GradCheckReport, Sampling};
pub use graph::{DiffGraph, Gradients, Var};
pub use kernels::{kl_divergence, nll, sigmoid, softmax, AttnLayout};
pub use scalar::{gemm, Scalar, Trans};
pub use tensor::Tensor;
