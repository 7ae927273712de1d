//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records operations as they execute (define-by-run) and replays
//! them in reverse for gradients. Tapes are rebuilt per training step and are
//! confined to one thread; [`Tensor`]s are plain data and move freely between
//! threads.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var, SIGMOID_CLAMP};
pub use tensor::Tensor;
