//! Numerical substrate: dense f32 tensors, a reverse-mode autodiff tape,
//! and the Adam optimizer. Everything here is deterministic: fixed
//! summation orders, no threading, no hidden randomness.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{causal_mask, NodeId, Tape};
pub use tensor::Tensor;
