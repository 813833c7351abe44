//! Dense tensor math with reverse-mode automatic differentiation, the neural
//! layers the agents need, and the Adam optimizer.

mod adam;
mod error;
pub mod nn;
mod ops;
pub mod serialize;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use error::NumericsError;
pub use nn::{conv2d, gru_step, linear, scaled_uniform, spectral_normalize, GruParams, SpectralState};
pub use tape::{backward, Gradients, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
