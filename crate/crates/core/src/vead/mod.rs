// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual edit adapter: cross-attention from visual states to an edit signal,
//! gated per patch by an influence mapper.

mod adapter;
pub mod diff;
mod params;

pub use adapter::{
    adapt, adapted_visual, compute_edit_signal, cross_attend, forward_with_adapter, im_intensity, AdapterHook,
    EditSignal,
};
pub use params::{Mlp2, VeadParams};
