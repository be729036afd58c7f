//! Minimal numerics: dense tensors, tape-based reverse-mode
//! differentiation, Adam, and seeded randomness.

pub mod adam;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamError, AdamState};
pub use rng::{randn, Rng};
pub use tape::{Gradients, Tape, TapeError, Var};
pub use tensor::Tensor;
